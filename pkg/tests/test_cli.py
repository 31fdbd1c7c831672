import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from dit_lab import analytics, cli, config, experiments, reports

TINY = {
    "dataset": {"kind": "synthetic", "n_train": 24, "n_test": 12, "dim": 3, "separation": 2.0, "flip_rate": 0.0},
    "train": {"steps": 36, "batch_size": 4, "lr": 0.1},
    "windows": {"mode": "epochs"},
    "analysis": {"tracked_samples": 8, "replay_pairs": 5},
    "seeds": [0],
    "output": "out",
}


def _config(tmp_path, **overrides):
    doc = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key].update(value)
        else:
            doc[key] = value
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    return path


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config -----------------------------------------------------------------------

def test_config_defaults_and_hash_stability(tmp_path):
    a = config.load(_config(tmp_path))
    assert a["model"]["kind"] == "logistic" and a["baselines"]["loo"] is True
    assert a["query"] == {"kind": "test_set_loss"}
    assert config.config_hash(a) == config.config_hash(config.normalize(json.loads(json.dumps(a))))
    assert config.train_hash(a, 0) != config.train_hash(a, 1)
    b = json.loads(json.dumps(a))
    b["analysis"]["p_threshold"] = 0.01
    assert config.train_hash(a, 0) == config.train_hash(b, 0)
    assert config.config_hash(a) != config.config_hash(b)


@pytest.mark.parametrize("bad", [
    {"windows": {"mode": "explicit", "list": [[5, 5]]}},
    {"windows": {"mode": "explicit", "list": [[0, 99]]}},
    {"windows": {"mode": "explicit", "list": []}},
    {"windows": {"mode": "sometimes"}},
    {"train": {"steps": -1}},
    {"train": {"batch_size": 50}},
    {"train": {"lr": -0.1}},
    {"dataset": {"kind": "parquet"}},
    {"dataset": {"flip_rate": 1.0}},
    {"query": {"kind": "test_loss"}},
    {"model": {"kind": "cnn"}},
    {"seeds": []},
    {"seeds": [1, 1]},
    {"extra": 1},
])
def test_config_validation_errors(tmp_path, bad):
    with pytest.raises(config.ConfigError):
        config.load(_config(tmp_path, **bad))


def test_invalid_json_is_config_error(tmp_path):
    (tmp_path / "broken.json").write_text("{")
    assert _run("train", "--config", tmp_path / "broken.json") == cli.EXIT_CONFIG


# -- exit codes -------------------------------------------------------------------

def test_invalid_window_exits_2_without_writing(tmp_path, capsys):
    path = _config(tmp_path, windows={"mode": "explicit", "list": [[10, 4]]})
    assert _run("train", "--config", path) == cli.EXIT_CONFIG
    assert not (tmp_path / "out").exists()
    assert "config error" in capsys.readouterr().err


def test_empty_window_list_exits_2(tmp_path):
    path = _config(tmp_path, windows={"mode": "explicit", "list": []})
    assert _run("influence", "--config", path) == cli.EXIT_CONFIG


def test_influence_without_training_is_mismatch(tmp_path):
    assert _run("influence", "--config", _config(tmp_path)) == cli.EXIT_MISMATCH


def test_stale_trajectory_exits_3(tmp_path):
    path = _config(tmp_path)
    assert _run("train", "--config", path) == 0
    _config(tmp_path, train={"lr": 0.2})
    assert _run("influence", "--config", path) == cli.EXIT_MISMATCH


def test_corrupted_trajectory_exits_3(tmp_path):
    path = _config(tmp_path)
    assert _run("train", "--config", path) == 0
    traj = tmp_path / "out" / "trajectories" / "seed0.dit1"
    raw = bytearray(traj.read_bytes())
    raw[-3] ^= 0xFF
    traj.write_bytes(bytes(raw))
    assert _run("influence", "--config", path) == cli.EXIT_MISMATCH
    # the explicit-path route skips the digest but still checks the structure
    traj.write_bytes(bytes(raw[:-5]))
    assert _run("influence", "--config", path, "--trajectory", traj) == cli.EXIT_MISMATCH


def test_runtime_error_exits_1(tmp_path):
    path = _config(tmp_path, train={"lr": 1e6})
    assert _run("compare", "--config", path) == cli.EXIT_RUNTIME


def test_compare_requires_loo(tmp_path):
    path = _config(tmp_path, baselines={"loo": False})
    assert _run("compare", "--config", path) == cli.EXIT_CONFIG


# -- train / influence ------------------------------------------------------------

def test_train_and_influence_rows_and_manifest(tmp_path):
    path = _config(tmp_path, seeds=[0, 1])
    assert _run("train", "--config", path) == 0
    assert _run("influence", "--config", path) == 0
    out = tmp_path / "out"
    rows = _rows(out / "influence" / "seed1.csv")
    assert rows[0] == list(reports.INFLUENCE_HEADER)
    # 24 samples x 6 epochs
    assert len(rows) - 1 == 24 * 6
    assert {(r[1], r[2]) for r in rows[1:]} == {(str(6 * e), str(6 * e + 6)) for e in range(6)}
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["train_hashes"]) == {"0", "1"}
    entry = manifest["commands"]["influence"]
    assert entry["config_hash"] == config.config_hash(config.load(path))
    assert "influence_seed0" in entry["artifacts"]


def test_zero_steps_writes_header_only(tmp_path):
    path = _config(tmp_path, train={"steps": 0}, windows={"mode": "full"})
    assert _run("train", "--config", path) == 0
    raw = (tmp_path / "out" / "trajectories" / "seed0.dit1").read_bytes()
    assert len(raw) == 4 + 52 + 8 * 4


def test_train_and_influence_are_byte_identical_on_rerun(tmp_path):
    path = _config(tmp_path)
    out = tmp_path / "out"
    assert _run("train", "--config", path) == 0
    assert _run("influence", "--config", path) == 0
    first = {p: (out / p).read_bytes() for p in ("trajectories/seed0.dit1", "influence/seed0.csv",
                                                 "influence/influence.json")}
    assert _run("train", "--config", path) == 0
    assert _run("influence", "--config", path) == 0
    for p, b in first.items():
        assert (out / p).read_bytes() == b


def test_seed_override_and_out_flag(tmp_path):
    path = _config(tmp_path, seeds=[0, 1, 2])
    other = tmp_path / "elsewhere"
    assert _run("train", "--config", path, "--out", other, "--seed-override", 2) == 0
    assert [p.name for p in (other / "trajectories").iterdir()] == ["seed2.dit1"]


def test_replay_check_passes_then_catches_tampering(tmp_path):
    path = _config(tmp_path, train={"checkpoint_interval": 6})
    assert _run("train", "--config", path) == 0
    assert _run("replay-check", "--config", path) == 0
    report = json.loads((tmp_path / "out" / "replay_check.json").read_text())
    assert report["0"]["ok"] and report["0"]["max_influence_diff"] <= 1e-10
    ck = tmp_path / "out" / "trajectories" / "seed0.ditc"
    raw = bytearray(ck.read_bytes())
    raw[-2] ^= 0x10
    ck.write_bytes(bytes(raw))
    assert _run("replay-check", "--config", path) == cli.EXIT_MISMATCH


# -- compare / detect / dynamics ------------------------------------------------------

def test_compare_single_seed_reports_zero_std(tmp_path, capsys):
    path = _config(tmp_path)
    assert _run("compare", "--config", path) == 0
    text = capsys.readouterr().out
    assert re.search(r"DIT\s+\d\.\d\d ± 0\.00", text)
    rows = _rows(tmp_path / "out" / "compare" / "compare.csv")
    assert rows[0] == ["seed", "method", "pearson", "spearman", "kendall", "jaccard"]
    std_rows = [r for r in rows if r[0] == "std"]
    assert std_rows and all(float(v) == 0.0 for r in std_rows for v in r[2:])


def test_self_comparison_metrics_are_one(tmp_path):
    cfg = config.load(_config(tmp_path))
    setup = experiments.setup_seed(cfg, 0)
    res = experiments.compare_seed(cfg, setup)
    dit_vec = res["vectors"]["dit"]
    assert all(v == pytest.approx(1.0) for v in analytics.agreement(dit_vec, dit_vec).values())


def test_detect_rate_zero_has_no_flips(tmp_path):
    path = _config(tmp_path)
    assert _run("detect", "--config", path) == 0
    rows = _rows(tmp_path / "out" / "detect" / "detect.csv")
    assert rows[0] == ["seed", "k", *experiments.DETECT_METHODS]
    assert rows[1][1] == "0" and all(v == "0" for v in rows[1][2:])


def test_detect_reports_counts_up_to_k(tmp_path):
    path = _config(tmp_path, dataset={"flip_rate": 0.25})
    assert _run("detect", "--config", path) == 0
    doc = json.loads((tmp_path / "out" / "detect" / "detect.json").read_text())
    k = doc["per_seed"]["0"]["k"]
    assert k == 6
    assert all(0 <= c <= k for c in doc["per_seed"]["0"]["counts"].values())


def test_dynamics_outputs(tmp_path, capsys):
    path = _config(tmp_path, seeds=[0, 1])
    assert _run("dynamics", "--config", path) == 0
    text = capsys.readouterr().out
    for lab in analytics.PatternLabel:
        assert re.search(rf"{lab.value}\s+\d+\.\d\d ± \d+\.\d\d", text)
    out = tmp_path / "out" / "dynamics"
    for row in _rows(out / "patterns.csv")[1:]:
        assert abs(sum(float(v) for v in row[1:]) - 100.0) <= 0.01
    taus = _rows(out / "stage_tau.csv")
    assert taus[0][3:] == [name for name, _, _ in analytics.STAGE_PAIRS]
    assert (out / "centroids.svg").read_text().lstrip().startswith("<?xml")


def test_dynamics_needs_six_epochs(tmp_path):
    path = _config(tmp_path, train={"steps": 20})
    assert _run("dynamics", "--config", path) == cli.EXIT_RUNTIME


def test_constant_series_reports_all_stable():
    series = analytics.InfluenceSeries(np.ones((10, 7)), np.arange(10))
    rep = experiments.pattern_report(series)
    assert rep["distribution"]["StableInfluencer"] == 100.0
    assert sum(rep["distribution"].values()) == 100.0


def test_dynamics_table_format():
    fake = [{"distribution": {lab.value: v for lab, v in zip(analytics.PatternLabel, vals)},
             "stage_tau": {name: 0.5 for name, _, _ in analytics.STAGE_PAIRS}}
            for vals in ([50.0, 25.0, 25.0, 0.0], [75.0, 0.0, 25.0, 0.0])]
    dist, taus = cli.dynamics_tables(fake)
    assert "62.50 ± 12.50" in dist and "0.50 ± 0.00" in taus


# -- reports ----------------------------------------------------------------------------

def test_pm_and_mean_std():
    assert reports.pm([1.0, 3.0]) == "2.00 ± 1.00"
    assert reports.pm([0.123456]) == "0.12 ± 0.00"
    assert reports.mean_std([2.0, 4.0, 6.0]) == pytest.approx((4.0, np.std([2.0, 4.0, 6.0])))


def test_csv_and_json_are_deterministic(tmp_path):
    rows = [[0, 0.1, "a"], [1, 1e-17, "b"]]
    reports.write_csv(tmp_path / "a.csv", ["i", "v", "s"], rows)
    reports.write_csv(tmp_path / "b.csv", ["i", "v", "s"], rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert float(_rows(tmp_path / "a.csv")[2][1]) == 1e-17
    reports.write_json(tmp_path / "x.json", {"b": np.float64(1.5), "a": np.arange(2)})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": [0, 1], "b": 1.5}


def test_svg_is_reproducible(tmp_path):
    series = {"A": np.sin(np.arange(10.0)), "B": np.cos(np.arange(10.0))}
    reports.write_svg_lines(tmp_path / "a.svg", series)
    reports.write_svg_lines(tmp_path / "b.svg", series)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dit_lab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "dit-lab" in proc.stdout
