import csv
import io as stdio
import json
import subprocess
import sys

import numpy as np
import pytest

from lowrank_quant.cli import fmt, main
from lowrank_quant.io import layers_equal, load_pack, save_tensor
from lowrank_quant.tensor import Rng, synth_outlier_matrix


@pytest.fixture
def data(tmp_path):
    r = Rng(3)
    x = synth_outlier_matrix(24, 64, [5, 40], 40.0, r.spawn(0))
    w = r.spawn(1).standard_normal(64, 48)
    save_tensor(tmp_path / "x.svdqt", x)
    save_tensor(tmp_path / "w.svdqt", w)
    return tmp_path, ["--weights", str(tmp_path / "w.svdqt"), "--calib", str(tmp_path / "x.svdqt")]


def rows_of(text):
    return list(csv.reader(stdio.StringIO(text)))


def test_fmt_is_shortest_round_trip():
    assert fmt(64 / 3072) == "0.020833333333333332"
    assert float(fmt(0.1)) == 0.1


def test_quantize_and_eval(data, capsys):
    d, io_args = data
    assert main(["quantize", *io_args, "--rank", "8", "--iters", "2", "--out", str(d / "pack")]) == 0
    report = json.loads((d / "pack" / "report.json").read_text())
    assert report["preset"] == "int4" and report["rank"] == 8
    assert report["E"] == min(report["history"])
    assert main(["eval", "--pack", str(d / "pack"), *io_args]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again["E"] == report["E"]


def test_degenerate_quantize_matches_naive_row(data, capsys):
    d, io_args = data
    args = ["quantize", *io_args, "--rank", "0", "--alpha-grid", "off", "--iters", "0", "--out", str(d / "p")]
    assert main(args) == 0
    e = json.loads((d / "p" / "report.json").read_text())["E"]
    assert main(["compare", *io_args, "--rank", "4", "--iters", "1"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert rows[1][0] == "naive-RTN" and float(rows[1][1]) == e


def test_compare_csv(data, capsys):
    d, io_args = data
    argv = ["compare", *io_args, "--rank", "4", "--iters", "1"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    rows = rows_of(first)
    assert rows[0] == ["scheme", "E", "relative_E", "x_norm", "w_err_norm", "x_err_norm", "w_norm"]
    assert [r[0] for r in rows[1:]] == ["naive-RTN", "smooth-only", "svd-only", "lorc", "svdquant-RTN", "svdquant-GPTQ"]
    assert main(argv) == 0
    assert capsys.readouterr().out == first


def test_compare_to_file(data):
    d, io_args = data
    assert main(["compare", *io_args, "--rank", "4", "--iters", "0", "--alpha", "0.5", "--out", str(d / "c.csv")]) == 0
    assert len(rows_of((d / "c.csv").read_text())) == 7


def test_spectrum(data, capsys):
    d, io_args = data
    assert main(["spectrum", *io_args, "--rank", "4"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert rows[0] == ["index", "sigma_W", "sigma_W_hat", "sigma_R"] and len(rows) == 49
    sig = [float(r[1]) for r in rows[1:]]
    assert sig == sorted(sig, reverse=True)


def test_ranksweep(data, capsys):
    d, io_args = data
    assert main(["ranksweep", *io_args, "--ranks", "0,4,16", "--iters", "1"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert rows[0] == ["rank", "relative_E", "param_overhead"]
    assert [r[0] for r in rows[1:]] == ["0", "4", "16"]
    assert float(rows[3][2]) == (64 * 16 + 48 * 16) / (64 * 48)


def test_costmodel(capsys, tmp_path):
    assert main(["costmodel", "--shape", "4096,3072,3072", "--rank", "32"]) == 0
    rows = rows_of(capsys.readouterr().out)
    assert [r[0] for r in rows[1:]] == ["unfused", "fused"]
    unfused, fused = (float(r[6]) for r in rows[1:])
    assert unfused >= 5 * fused
    hw = tmp_path / "hw.json"
    hw.write_text(json.dumps({"dram_bandwidth": 2e12}))
    assert main(["costmodel", "--shape", "4096,3072,3072", "--rank", "32", "--hw", str(hw)]) == 0


def test_lora_fuse(data):
    d, io_args = data
    assert main(["quantize", *io_args, "--rank", "4", "--iters", "1", "--out", str(d / "p")]) == 0
    save_tensor(d / "a.svdqt", Rng(1).standard_normal(64, 2))
    save_tensor(d / "b.svdqt", Rng(2).standard_normal(2, 48))
    argv = ["lora-fuse", "--pack", str(d / "p"), "--lora-a", str(d / "a.svdqt"),
            "--lora-b", str(d / "b.svdqt"), "--scale", "0.5", "--out", str(d / "q")]
    assert main(argv) == 0
    assert load_pack(d / "q").rank == 6


def test_synth(tmp_path):
    out = tmp_path / "s.svdqt"
    assert main(["synth", "--rows", "4", "--cols", "6", "--outliers", "1", "--seed", "2", "--out", str(out)]) == 0
    from lowrank_quant.io import load_tensor

    assert np.array_equal(load_tensor(out), synth_outlier_matrix(4, 6, [1], 50.0, Rng(2)))


def test_quantize_is_reproducible(data):
    d, io_args = data
    for name in ("a", "b"):
        assert main(["quantize", *io_args, "--preset", "nvfp4", "--rank", "4", "--iters", "1", "--out", str(d / name)]) == 0
    assert layers_equal(load_pack(d / "a"), load_pack(d / "b"))
    for f in sorted(p.name for p in (d / "a").iterdir()):
        assert (d / "a" / f).read_bytes() == (d / "b" / f).read_bytes()


def test_selftest_subset(capsys):
    assert main(["selftest", "--only", "1,11"]) == 0
    err = capsys.readouterr().err
    assert "[PASS] criterion  1" in err and "2/2 criteria passed" in err


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["costmodel", "--rank", "3"],
        ["costmodel", "--shape", "1,2", "--rank", "3"],
        ["quantize", "--calib", "x", "--weights", "w", "--out", "o", "--alpha", "2"],
        ["quantize", "--calib", "x", "--weights", "w", "--out", "o", "--alpha-grid", "a,b"],
        ["ranksweep", "--calib", "x", "--weights", "w", "--ranks", ""],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_data_errors_exit_1(data, capsys):
    d, io_args = data
    (d / "bad.svdqt").write_bytes(b"nope")
    assert main(["quantize", "--weights", str(d / "bad.svdqt"), "--calib", str(d / "x.svdqt"), "--out", str(d / "o")]) == 1
    assert "bad magic" in capsys.readouterr().err
    assert main(["quantize", "--weights", str(d / "missing.svdqt"), "--calib", str(d / "x.svdqt"), "--out", str(d / "o")]) == 1
    assert main(["quantize", *io_args, "--rank", "999", "--out", str(d / "o")]) == 1
    assert main(["eval", "--pack", str(d), *io_args]) == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "lowrank_quant.cli", "costmodel", "--shape", "8,16,16", "--rank", "2"],
        capture_output=True, text=True,
    )
    assert res.returncode == 0 and res.stdout.startswith("plan,")
