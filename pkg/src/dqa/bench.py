"""Direct-vs-DQA benchmark over seeds and bit widths.

Each seed draws a calibration subset (and, without a model file, a fresh
planted instance), ranks channels on it, then evaluates every method on the
held-out samples while recording quantization error, shifting-error
histograms, Huffman ratios and storage cost at each capture point.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import huffman
from .pipeline import Recorder, dqa_hook
from .quant_core import HuffmanMode, QuantConfig, rounding_errors
from .ranking import greedy_rank, select_important
from .storage import memory_report
from .toy import evaluate_accuracy, make_planted_model

REPORT_SCHEMA = "dqa-bench/1"
METHODS = ("direct", "dqa")


@dataclass(frozen=True)
class BenchConfig:
    bits: tuple = (3, 4, 5)
    extra_bits: int = 3
    important_ratio: float = 0.5
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = METHODS
    huffman_mode: str = "dynamic"
    calib_size: int = 256
    batch_size: int = 128
    # planted instance shape, used when no model is supplied
    channels: int = 8
    noise_level: float = 0.5
    depth: int = 1
    samples: int = 1024

    def __post_init__(self):
        for name in ("bits", "seeds", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        HuffmanMode(self.huffman_mode)
        for n in self.bits:
            QuantConfig(n, self.extra_bits, self.important_ratio, self.huffman_mode)


@dataclass
class _Cell:
    accuracy: list = field(default_factory=list)
    abs_err_sum: float = 0.0
    abs_err_max: float = 0.0
    count: int = 0
    re_sum: float = 0.0
    re_count: int = 0
    clipped: int = 0
    raw_error_bits: int = 0
    payload_bits: int = 0
    table_bits: int = 0
    direct_bits: int = 0
    dqa_bits: int = 0
    float_bits: int = 0
    histograms: dict = field(default_factory=dict)

    def absorb(self, recorder, m):
        for layer_id, records in recorder.records.items():
            hist = self.histograms.get(layer_id, [0] * (1 << m))
            for rec in records:
                q = rec.quantized
                err = np.abs(rec.original.channels - rec.reconstructed.channels)
                self.abs_err_sum += float(err.sum())
                self.abs_err_max = max(self.abs_err_max, float(err.max()))
                self.count += err.size
                re, clipped = rounding_errors(rec.original.channels, err, q)
                self.re_sum += float(re.sum())
                self.re_count += re.size
                self.clipped += clipped
                mem = memory_report(q)
                self.direct_bits += mem.direct_bits
                self.dqa_bits += mem.dqa_bits
                self.float_bits += mem.raw_float_bits
                if q.has_error_section:
                    symbols = huffman.decode(q.error_stream, q.huffman_table)
                    counts = np.bincount(symbols, minlength=1 << m)
                    hist = [a + int(b) for a, b in zip(hist, counts)]
                    self.raw_error_bits += q.error_stream.symbol_count * m
                    self.payload_bits += q.error_stream.bit_count
                    self.table_bits += q.huffman_table.size_bits()
            self.histograms[layer_id] = hist

    def summary(self):
        ratio = (lambda bits: self.raw_error_bits / bits if bits else None)
        return {
            "accuracy_mean": float(np.mean(self.accuracy)),
            "accuracy_per_seed": self.accuracy,
            "mean_abs_error": self.abs_err_sum / self.count if self.count else 0.0,
            "max_abs_error": self.abs_err_max,
            "mean_re": self.re_sum / self.re_count if self.re_count else 0.0,
            "clipped": self.clipped,
            "huffman_ratio_payload": ratio(self.payload_bits),
            "huffman_ratio_with_table": ratio(self.payload_bits + self.table_bits),
            "memory": {
                "float_bits": self.float_bits,
                "direct_bits": self.direct_bits,
                "dqa_bits": self.dqa_bits,
                "overhead_pct": 100.0 * (self.dqa_bits - self.direct_bits) / self.direct_bits,
                "compression_vs_float": self.float_bits / self.dqa_bits,
            },
        }


def _static_encoders(model, calib, config, important, batch_size):
    """Fit one fixed table per layer on the calibration subset."""
    rec = Recorder()
    evaluate_accuracy(model, calib, dqa_hook(config, important, rec), batch_size)
    encoders = {}
    for layer_id, records in rec.records.items():
        hist = None
        for r in records:
            if r.quantized.has_error_section:
                h = huffman.build_histogram(huffman.decode(r.quantized.error_stream, r.quantized.huffman_table), config.m)
                hist = h if hist is None else hist + h
        if hist is not None:
            encoders[layer_id] = huffman.static_encoder(huffman.build_static_table(hist))
    return encoders


def run_bench(config, model=None, dataset=None, rank_table=None):
    """Returns the structured report as a plain dict."""
    cells = {(meth, n): _Cell() for n in config.bits for meth in config.methods}
    full_precision = []
    rank_sets = {}
    for seed in config.seeds:
        if model is None:
            mdl, ds = make_planted_model(seed, config.channels, config.noise_level,
                                         depth=config.depth, samples=config.samples)
        else:
            mdl, ds = model, dataset
        calib, test = ds.split(config.calib_size, seed)
        full_precision.append(evaluate_accuracy(mdl, test, None, config.batch_size))
        for n in config.bits:
            qc = QuantConfig(n, config.extra_bits, config.important_ratio, config.huffman_mode)
            rt = rank_table or greedy_rank(mdl, calib, qc, metadata={"seed": seed})
            important = {lid: select_important(rt, lid, config.important_ratio) for lid in mdl.capture_points}
            rank_sets.setdefault(str(n), {})[str(seed)] = {lid: sorted(s) for lid, s in important.items()}
            encoders = None
            if qc.huffman_mode is HuffmanMode.STATIC and "dqa" in config.methods:
                encoders = _static_encoders(mdl, calib, qc, important, config.batch_size)
            for meth in config.methods:
                rec = Recorder()
                hook = dqa_hook(qc, important if meth == "dqa" else {}, rec, encoders if meth == "dqa" else None)
                cell = cells[(meth, n)]
                cell.accuracy.append(evaluate_accuracy(mdl, test, hook, config.batch_size))
                cell.absorb(rec, qc.m)

    report_cells = []
    histograms = {}
    for (meth, n), cell in cells.items():
        report_cells.append({"method": meth, "n": n, "m": config.extra_bits if meth == "dqa" else 0,
                             **cell.summary()})
        if meth == "dqa":
            histograms[str(n)] = {lid: {"counts": h, "symbols": int(sum(h))} for lid, h in cell.histograms.items()}
    gaps = {}
    if set(METHODS) <= set(config.methods):
        for n in config.bits:
            gaps[str(n)] = float(np.mean(cells[("dqa", n)].accuracy) - np.mean(cells[("direct", n)].accuracy))
    return {
        "schema": REPORT_SCHEMA,
        "config": asdict(config),
        "source": "planted" if model is None else "files",
        "full_precision_accuracy": float(np.mean(full_precision)),
        "cells": report_cells,
        "accuracy_gap": gaps,
        "important_sets": rank_sets,
        "shifting_error_histograms": histograms,
    }


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_json(report):
    return json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"


CELL_COLUMNS = ("method", "n", "m", "accuracy_mean", "mean_abs_error", "max_abs_error", "mean_re",
                "clipped", "huffman_ratio_payload", "huffman_ratio_with_table", "overhead_pct")


def report_text(report):
    """Tab-delimited cell table followed by one histogram row per layer."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["# full_precision_accuracy", f"{report['full_precision_accuracy']:.6f}"])
    w.writerow(CELL_COLUMNS)
    for c in report["cells"]:
        row = dict(c, overhead_pct=c["memory"]["overhead_pct"])
        w.writerow([_fmt(row[k]) for k in CELL_COLUMNS])
    w.writerow([])
    w.writerow(["n", "layer_id", "symbols", "counts"])
    for n, layers in report["shifting_error_histograms"].items():
        for lid, h in layers.items():
            w.writerow([n, lid, h["symbols"], " ".join(map(str, h["counts"]))])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
