from __future__ import annotations

import json

import pytest

from kvmerger.cli import main
from kvmerger.traceio import load_trace


@pytest.fixture
def trace_path(tmp_path):
    path = tmp_path / "trace.kvtr"
    rc = main(
        [
            "synth",
            "--layers", "1", "--heads", "2", "--seq", "96", "--dim", "8",
            "--locality", "0.1", "--seed", "0", "--out", str(path),
        ]
    )
    assert rc == 0
    return path


def test_synth_writes_a_loadable_trace(trace_path):
    t = load_trace(trace_path)
    assert (t.num_layers, t.num_heads, t.seq_len, t.head_dim) == (1, 2, 96, 8)
    assert t.queries is not None


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.kvtr", tmp_path / "b.kvtr"
    for out in (a, b):
        assert main(["synth", "--seq", "32", "--dim", "8", "--seed", "5",
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_compress_reports_to_stdout(trace_path, capsys):
    rc = main(["compress", "--trace", str(trace_path)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["policy"] == "kvmerger"
    assert 0.0 < report["global_ratio"] <= 1.0
    assert report["perturbation"]["mean"] >= 0.0


def test_compress_default_parameters_actually_compress(trace_path, capsys):
    rc = main(["compress", "--trace", str(trace_path)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["global_ratio"] < 1.0
    assert report["config"]["epsilon"] == 0.75
    assert report["config"]["recent_frac"] == 0.17
    assert report["config"]["protect_frac"] == 0.12


def test_compress_policy_none_reports_zero_perturbation(trace_path, tmp_path):
    out = tmp_path / "report.json"
    rc = main(["compress", "--trace", str(trace_path), "--policy", "none",
               "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["global_ratio"] == 1.0
    assert report["perturbation"]["max"] == 0.0


def test_compress_target_budget_flag(trace_path, capsys):
    rc = main(["compress", "--trace", str(trace_path), "--target-budget", "0.5"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["global_ratio"] - 0.5) <= 0.01


def test_compress_is_deterministic(trace_path, tmp_path):
    outs = []
    for name in ("r1.json", "r2.json"):
        out = tmp_path / name
        assert main(["compress", "--trace", str(trace_path), "--seed", "3",
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_analyze_writes_expected_csvs(trace_path, tmp_path, capsys):
    outdir = tmp_path / "analysis"
    rc = main(["analyze", "--trace", str(trace_path), "--full",
               "--outdir", str(outdir)])
    assert rc == 0
    assert (outdir / "adjacent.csv").exists()
    assert (outdir / "heatmap.csv").exists()
    assert (outdir / "layer_profile.csv").exists()
    assert "adjacent sim mean=" in capsys.readouterr().out


def test_analyze_rejects_out_of_range_head(trace_path):
    rc = main(["analyze", "--trace", str(trace_path), "--head", "9"])
    assert rc == 1


def test_compare_emits_reports_and_csv(trace_path, tmp_path):
    out = tmp_path / "cmp.json"
    csv_path = tmp_path / "cmp.csv"
    rc = main(["compare", "--trace", str(trace_path),
               "--policies", "kvmerger,avg_merge,h2o", "--seeds", "0,1",
               "--target-budget", "0.5",
               "--out", str(out), "--csv", str(csv_path)])
    assert rc == 0
    reports = json.loads(out.read_text())
    assert len(reports) == 6
    ratios = [r["global_ratio"] for r in reports]
    assert max(ratios) - min(ratios) <= 0.01
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("policy,seed,")
    assert len(lines) == 7


def test_verify_rope_reports_clean_run(capsys):
    rc = main(["verify-rope", "--trials", "500", "--dim", "16"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["violations"] == 0
    assert report["trials"] == 500


def test_missing_trace_is_a_data_error(tmp_path):
    rc = main(["compress", "--trace", str(tmp_path / "nope.kvtr")])
    assert rc == 2


def test_corrupt_trace_is_a_data_error(trace_path):
    data = trace_path.read_bytes()
    trace_path.write_bytes(data[:-4])
    rc = main(["compress", "--trace", str(trace_path)])
    assert rc == 2


def test_bad_flag_value_is_a_usage_error(trace_path):
    rc = main(["compress", "--trace", str(trace_path), "--epsilon", "2.0"])
    assert rc == 1


def test_unknown_subcommand_is_a_usage_error():
    assert main(["frobnicate"]) == 1


def test_help_exits_cleanly():
    assert main(["--help"]) == 0
