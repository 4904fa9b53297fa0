"""``dqa`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation.
"""

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bench, huffman, storage, toy
from .errors import DQAError
from .quant_core import (
    ActivationTensor,
    QuantConfig,
    dqa_dequantize_layer,
    dqa_quantize_layer,
    measure_quant_error,
)
from .ranking import RankTable, ToyEvaluator, greedy_rank, select_important

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args, n=None):
    try:
        return QuantConfig(args.bits if n is None else n, args.extra_bits, args.ratio, args.huffman_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write(path, data):
    if path is None or str(path) == "-":
        sys.stdout.write(data if isinstance(data, str) else data.decode())
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


def _load_model(args):
    model = toy.from_bytes(Path(args.model).read_bytes())
    dataset = toy.dataset_from_bytes(Path(args.dataset).read_bytes())
    return model, dataset


def _load_dump(path, layer_id):
    arr = np.load(path, allow_pickle=False)
    if arr.ndim == 2:
        return ActivationTensor(layer_id, arr), arr.shape
    if arr.ndim > 2:
        return ActivationTensor.from_feature_map(layer_id, arr), arr.shape
    raise UsageError(f"activation dump must be (channels, length) or (batch, channels, ...), got {arr.shape}")


def _important(args, tensor):
    if args.ratio == 0:
        return frozenset()
    if not args.rank_table:
        raise UsageError("--ratio > 0 needs --rank-table to pick important channels")
    table = RankTable.loads(Path(args.rank_table).read_text())
    imp = select_important(table, tensor.layer_id, args.ratio)
    if len(table.order(tensor.layer_id)) != tensor.channel_count:
        raise UsageError("rank table channel count does not match the dump")
    return imp


def _encoder(args, config):
    if config.huffman_mode.value == "static":
        if not args.huffman_table:
            raise UsageError("static Huffman mode needs --huffman-table")
        table, _ = huffman.HuffmanTable.from_bytes(Path(args.huffman_table).read_bytes())
        return huffman.static_encoder(table)
    return None


# -- subcommands ---------------------------------------------------------------

def cmd_generate(args):
    model, dataset = toy.make_planted_model(args.seed, args.channels, args.noise, args.signal,
                                            args.depth, args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.dqm").write_bytes(toy.to_bytes(model))
    (out / "dataset.dqd").write_bytes(toy.dataset_to_bytes(dataset))
    meta = {"seed": args.seed, "channels": args.channels, "noise_level": args.noise, "depth": args.depth,
            "samples": args.samples, "capture_points": list(model.capture_points),
            "planted": model.meta["planted"]}
    (out / "planted.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}/model.dqm, dataset.dqd, planted.json (planted channels {meta['planted']})")


def cmd_rank(args):
    model, dataset = _load_model(args)
    config = _config(args)
    calib, held = dataset.split(args.calib_size, args.seed)
    evaluator = ToyEvaluator(config.n)
    eval_set = held if args.eval_split == "holdout" else calib
    counter = {"calls": 0}

    def counted(*a):
        counter["calls"] += 1
        return evaluator(*a)

    def evaluate(mdl, layer_id, channel, most_important, _):
        return counted(mdl, layer_id, channel, most_important, eval_set)

    meta = {"seed": args.seed, "dataset_id": Path(args.dataset).name, "eval_split": args.eval_split,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds") if args.stamp else None}
    table = greedy_rank(model, calib, config, evaluate, meta)
    expected = sum(model.channel_count(lid) for lid in model.capture_points)
    if counter["calls"] != expected:
        raise InvariantViolation(f"greedy search made {counter['calls']} evaluations, expected {expected}")
    _write(args.out, table.dumps())
    print(f"ranked {len(table.layers)} layers with {counter['calls']} evaluations", file=sys.stderr)


def _quantize(args):
    tensor, shape = _load_dump(args.input, args.layer)
    config = _config(args)
    q = dqa_quantize_layer(tensor, config, _important(args, tensor), _encoder(args, config))
    return tensor, shape, q


def cmd_quantize(args):
    _, _, q = _quantize(args)
    _write(args.out, storage.serialize(q))


def cmd_dequantize(args):
    q = storage.deserialize(Path(args.input).read_bytes())
    recon = dqa_dequantize_layer(q)
    np.save(args.out, recon.channels.astype(np.float32) if args.float32 else recon.channels)


def cmd_roundtrip(args):
    tensor, shape, q = _quantize(args)
    blob = storage.serialize(q)
    q2 = storage.deserialize(blob)
    if q2 != q or storage.serialize(q2) != blob:
        raise InvariantViolation("blob did not reload bit-identically")
    recon = dqa_dequantize_layer(q2)
    err = measure_quant_error(tensor, recon, q2)
    mem = storage.memory_report(q2)
    tol = 1e-9 * max(q2.scale.absmax, 1.0)
    bound = 0.5 * (q2.scale.delta_nm if len(q2.important) == q2.channel_count and q2.m else q2.scale.delta_n)
    if err.clipped == 0 and err.max_abs > bound + tol:
        raise InvariantViolation(f"max error {err.max_abs} exceeds rounding bound {bound}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "layer.dqa").write_bytes(blob)
    np.save(out / "reconstructed.npy", recon.channels)
    report = {"layer_id": q2.layer_id, "n": q2.n, "m": q2.m, "important": list(q2.important),
              "delta_n": q2.scale.delta_n, "delta_nm": q2.scale.delta_nm, "error": err.as_dict(),
              "error_bound": bound, "memory": mem.as_dict(), "blob_bytes": len(blob)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"max abs error {err.max_abs:.6g} (bound {bound:.6g}), {len(blob)} bytes")


def cmd_bench(args):
    try:
        cfg = bench.BenchConfig(bits=tuple(args.bits), extra_bits=args.extra_bits, important_ratio=args.ratio,
                                seeds=tuple(args.seeds), methods=tuple(args.methods),
                                huffman_mode=args.huffman_mode, calib_size=args.calib_size,
                                channels=args.channels, noise_level=args.noise, depth=args.depth,
                                samples=args.samples)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = dataset = table = None
    if args.model or args.dataset:
        if not (args.model and args.dataset):
            raise UsageError("--model and --dataset go together")
        model, dataset = _load_model(args)
    if args.rank_table:
        table = RankTable.loads(Path(args.rank_table).read_text())
    report = bench.run_bench(cfg, model, dataset, table)
    text = bench.report_json(report) if args.report == "structured" else bench.report_text(report)
    _write(args.out, text)
    if args.plot:
        from . import plotting

        stem = Path(args.out).with_suffix("") if args.out and args.out != "-" else Path("bench")
        plotting.plot_error_histograms(report, f"{stem}_histograms.png")
        plotting.plot_accuracy(report, f"{stem}_accuracy.png")


def cmd_stats(args):
    q = storage.deserialize(Path(args.input).read_bytes())
    mem = storage.memory_report(q)
    out = {"layer_id": q.layer_id, "n": q.n, "m": q.m, "channels": q.channel_count,
           "channel_len": q.channel_len, "important": list(q.important), "memory": mem.as_dict()}
    if q.has_error_section:
        symbols = huffman.decode(q.error_stream, q.huffman_table)
        hist = huffman.build_histogram(symbols, q.m)
        raw = q.error_stream.symbol_count * q.m
        out["shifting_errors"] = {
            "counts": list(hist.counts),
            "entropy_bits": hist.entropy(),
            "average_code_length": q.huffman_table.average_length(hist),
            "code_lengths": list(q.huffman_table.code_lengths),
            "ratio_payload": huffman.compression_ratio(raw, q.error_stream),
            "ratio_with_table": huffman.compression_ratio(raw, q.error_stream, q.huffman_table.size_bits(), True),
        }
        if args.emit_table:
            Path(args.emit_table).write_bytes(huffman.build_static_table(hist).to_bytes())
    elif args.emit_table:
        raise UsageError("blob has no shifting errors to fit a table to")
    if args.report == "structured":
        _write(args.out, json.dumps(out, indent=2, sort_keys=True) + "\n")
    else:
        lines = [f"{k}\t{v}" for k, v in out.items() if not isinstance(v, dict)]
        for section in ("memory", "shifting_errors"):
            for k, v in out.get(section, {}).items():
                lines.append(f"{section}.{k}\t{v}")
        _write(args.out, "\n".join(lines) + "\n")


# -- parser -----------------------------------------------------------------------

def _quant_flags(p, multi_bits=False):
    if multi_bits:
        p.add_argument("--bits", "-n", type=int, nargs="+", default=[3, 4, 5])
    else:
        p.add_argument("--bits", "-n", type=int, default=3)
    p.add_argument("--extra-bits", "-m", type=int, default=3)
    p.add_argument("--ratio", type=float, default=0.5, help="fraction of channels treated as important")
    p.add_argument("--huffman-mode", choices=["dynamic", "static"], default="dynamic")


def _planted_flags(p):
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--samples", type=int, default=1024)


def build_parser():
    parser = _Parser(prog="dqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="emit a planted toy model and dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signal", type=int, default=None, help="number of planted channels")
    _planted_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("rank", help="greedy channel ranking on calibration data")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    _quant_flags(p)
    p.add_argument("--seed", type=int, default=0, help="calibration subset draw")
    p.add_argument("--calib-size", type=int, default=256)
    p.add_argument("--eval-split", choices=["calib", "holdout"], default="calib")
    p.add_argument("--stamp", action="store_true", help="record a timestamp in the header")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_rank)

    for name, func, hlp in (("quantize", cmd_quantize, "activation dump -> blob"),
                            ("roundtrip", cmd_roundtrip, "quantize, serialize, reload, de-quantize")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--input", required=True, help=".npy activation dump")
        p.add_argument("--layer", default="layer0")
        p.add_argument("--rank-table")
        p.add_argument("--huffman-table", help="serialized table for static mode")
        _quant_flags(p)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("dequantize", help="blob -> .npy activation dump")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--float32", action="store_true")
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("bench", help="Direct vs DQA accuracy, error and storage statistics")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--rank-table")
    _quant_flags(p, multi_bits=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--methods", nargs="+", choices=list(bench.METHODS), default=list(bench.METHODS))
    p.add_argument("--calib-size", type=int, default=256)
    _planted_flags(p)
    p.add_argument("--report", choices=["text", "structured"], default="text")
    p.add_argument("--plot", action="store_true", help="render figures next to --out")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="storage and shifting-error statistics of a blob")
    p.add_argument("--input", required=True)
    p.add_argument("--emit-table", help="write a static Huffman table fitted to this blob")
    p.add_argument("--report", choices=["text", "structured"], default="text")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dqa: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DQAError, OSError, ValueError) as exc:
        print(f"dqa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantViolation as exc:
        print(f"dqa: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
