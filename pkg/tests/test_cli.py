import json
import subprocess
import sys

import numpy as np
import pytest

from dqa import storage
from dqa.bench import BenchConfig, report_text, run_bench
from dqa.cli import main
from dqa.huffman import HuffmanTable
from dqa.ranking import RankTable

SMALL = ["--seeds", "0", "1", "--samples", "512", "--bits", "3", "4"]


@pytest.fixture
def planted(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--seed", "3", "--channels", "6", "--samples", "512", "--out", str(out)]) == 0
    return out


@pytest.fixture
def dump(tmp_path):
    path = tmp_path / "act.npy"
    np.save(path, np.random.default_rng(0).normal(size=(4, 6, 5, 5)).astype(np.float32))
    return path


def uniform_rank_table(tmp_path, layer, count):
    path = tmp_path / "rank.jsonl"
    path.write_text(RankTable({layer: tuple((c, 1.0) for c in range(count))}).dumps())
    return path


def test_generate_writes_files(planted):
    meta = json.loads((planted / "planted.json").read_text())
    assert len(meta["planted"]) == 6 // 4
    assert (planted / "model.dqm").read_bytes()[:4] == b"DQAM"


def test_rank_is_deterministic(planted, tmp_path, capsys):
    args = ["rank", "--model", str(planted / "model.dqm"), "--dataset", str(planted / "dataset.dqd")]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert "6 evaluations" in capsys.readouterr().err
    table = RankTable.loads((tmp_path / "a.jsonl").read_text())
    planted_ch = json.loads((planted / "planted.json").read_text())["planted"]
    assert table.order("fc1")[0] in planted_ch


def test_rank_holdout_and_stamp(planted, tmp_path):
    out = tmp_path / "r.jsonl"
    args = ["rank", "--model", str(planted / "model.dqm"), "--dataset", str(planted / "dataset.dqd"),
            "--eval-split", "holdout", "--stamp", "--out", str(out)]
    assert main(args) == 0
    header = json.loads(out.read_text().splitlines()[0])
    assert header["eval_split"] == "holdout" and header["timestamp"]


def test_quantize_roundtrip_dequantize(dump, tmp_path):
    rank = uniform_rank_table(tmp_path, "conv", 6)
    blob = tmp_path / "x.dqa"
    common = ["--input", str(dump), "--layer", "conv", "--rank-table", str(rank)]
    assert main(["quantize", *common, "--out", str(blob)]) == 0
    q = storage.deserialize(blob.read_bytes())
    assert q.important == (0, 1, 2)
    rt = tmp_path / "rt"
    assert main(["roundtrip", *common, "--out", str(rt)]) == 0
    assert (rt / "layer.dqa").read_bytes() == blob.read_bytes()
    report = json.loads((rt / "report.json").read_text())
    assert report["blob_bytes"] == len(blob.read_bytes())
    assert main(["dequantize", "--input", str(blob), "--out", str(tmp_path / "back.npy")]) == 0
    np.testing.assert_array_equal(np.load(tmp_path / "back.npy"), np.load(rt / "reconstructed.npy"))


def test_roundtrip_direct_without_rank_table(dump, tmp_path):
    assert main(["roundtrip", "--input", str(dump), "--ratio", "0", "--out", str(tmp_path / "o")]) == 0


def test_stats_and_static_mode(dump, tmp_path, capsys):
    rank = uniform_rank_table(tmp_path, "conv", 6)
    blob, table = tmp_path / "x.dqa", tmp_path / "t.huf"
    common = ["--input", str(dump), "--layer", "conv", "--rank-table", str(rank)]
    assert main(["quantize", *common, "--out", str(blob)]) == 0
    assert main(["stats", "--input", str(blob), "--report", "structured", "--emit-table", str(table)]) == 0
    stats = json.loads(capsys.readouterr().out)
    se = stats["shifting_errors"]
    assert sum(se["counts"]) == 3 * 4 * 25
    assert stats["memory"]["dqa_bits"] > stats["memory"]["direct_bits"]
    static_tab, _ = HuffmanTable.from_bytes(table.read_bytes())
    assert all(static_tab.code_lengths)
    out = tmp_path / "s.dqa"
    assert main(["quantize", *common, "--huffman-mode", "static", "--huffman-table", str(table),
                 "--out", str(out)]) == 0
    assert storage.deserialize(out.read_bytes()).huffman_table == static_tab
    assert main(["stats", "--input", str(out)]) == 0
    assert "memory.dqa_bits" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["quantize", "--input", "x.npy"],
    ["bench", "--bits", "0"],
    ["bench", "--extra-bits", "9"],
])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        rc = main(argv)
        raise SystemExit(rc)
    assert exc.value.code == 1


def test_ratio_without_rank_table_is_usage_error(dump, tmp_path):
    assert main(["quantize", "--input", str(dump), "--out", str(tmp_path / "x")]) == 1


def test_static_without_table_is_usage_error(dump, tmp_path):
    rank = uniform_rank_table(tmp_path, "layer0", 6)
    assert main(["quantize", "--input", str(dump), "--rank-table", str(rank), "--huffman-mode", "static",
                 "--out", str(tmp_path / "x")]) == 1


def test_data_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.dqa"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["stats", "--input", str(bad)]) == 2
    assert main(["dequantize", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o.npy")]) == 2
    zeros = tmp_path / "z.npy"
    np.save(zeros, np.zeros((2, 3)))
    # an all-zero dump quantizes fine; a mismatched rank table is a data error
    assert main(["quantize", "--input", str(zeros), "--ratio", "0", "--out", str(tmp_path / "z.dqa")]) == 0
    rank = uniform_rank_table(tmp_path, "other", 2)
    assert main(["quantize", "--input", str(zeros), "--rank-table", str(rank), "--out", str(tmp_path / "q")]) == 2


def test_invariant_violation_exit_3(dump, tmp_path, monkeypatch):
    from dqa import cli

    monkeypatch.setattr(cli.storage, "deserialize", lambda blob: None)
    assert main(["roundtrip", "--input", str(dump), "--ratio", "0", "--out", str(tmp_path / "o")]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dqa", "stats", "--input", str(tmp_path / "nothing")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "dqa:" in proc.stderr


# -- bench ---------------------------------------------------------------------------

def test_bench_structured_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["bench", *SMALL, "--report", "structured", "--out", str(a)]) == 0
    assert main(["bench", *SMALL, "--report", "structured", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())
    assert report["schema"] == "dqa-bench/1"
    assert {(c["method"], c["n"]) for c in report["cells"]} == {("direct", 3), ("direct", 4), ("dqa", 3), ("dqa", 4)}


def test_bench_histogram_conservation():
    cfg = BenchConfig(bits=(3,), seeds=(0, 1), samples=512, channels=8)
    report = run_bench(cfg)
    test_size = 512 - cfg.calib_size
    important = 4  # half of eight channels
    h = report["shifting_error_histograms"]["3"]["fc1"]
    assert h["symbols"] == sum(h["counts"]) == important * test_size * len(cfg.seeds)
    dqa = next(c for c in report["cells"] if c["method"] == "dqa")
    direct = next(c for c in report["cells"] if c["method"] == "direct")
    assert direct["huffman_ratio_payload"] is None
    assert dqa["memory"]["direct_bits"] == direct["memory"]["direct_bits"]


def test_bench_text_report_is_tab_delimited():
    report = run_bench(BenchConfig(bits=(3,), seeds=(0,), samples=400))
    lines = report_text(report).splitlines()
    assert lines[1].split("\t")[:3] == ["method", "n", "m"]
    assert all(len(line.split("\t")) == 11 for line in lines[2:4])


def test_bench_static_mode():
    report = run_bench(BenchConfig(bits=(3,), seeds=(0,), samples=400, huffman_mode="static"))
    dqa = next(c for c in report["cells"] if c["method"] == "dqa")
    assert dqa["huffman_ratio_payload"] is not None


def test_bench_with_files_and_plots(planted, tmp_path):
    out = tmp_path / "bench.tsv"
    rc = main(["bench", "--model", str(planted / "model.dqm"), "--dataset", str(planted / "dataset.dqd"),
               "--seeds", "0", "--bits", "3", "--plot", "--out", str(out)])
    assert rc == 0
    assert out.read_text().startswith("# full_precision_accuracy")
    for name in ("bench_histograms.png", "bench_accuracy.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_bench_model_needs_dataset(planted):
    assert main(["bench", "--model", str(planted / "model.dqm")]) == 1
