"""Experiment grid plumbing: subset assignment, per-cell seeding, the
metrics table, and summary arithmetic."""
import csv

import numpy as np
import pytest

from trials.harness import (ExperimentConfig, HarnessError, METHODS, cell_seed,
                            emit_summary, load_experiment_config, make_subsets,
                            run_experiment)
from trials.market_data import SyntheticSpec
from trials.trainer import TrainConfig


def test_make_subsets_partition_and_determinism():
    assets = [f"A{k:03d}" for k in range(150)]
    subsets = make_subsets(assets, 5, 30, seed=4)
    assert len(subsets) == 5
    assert all(len(s) == 30 for s in subsets)
    flat = [a for s in subsets for a in s]
    assert len(set(flat)) == 150
    assert subsets == make_subsets(assets, 5, 30, seed=4)
    assert subsets != make_subsets(assets, 5, 30, seed=5)


def test_make_subsets_rejects_overdraw():
    with pytest.raises(HarnessError):
        make_subsets(list("abcdef"), 3, 3, seed=0)


def test_cell_seed_stable_and_distinct():
    s = cell_seed(0, 1, "trials")
    assert s == cell_seed(0, 1, "trials")
    seen = {cell_seed(b, sub, m) for b in (0, 1) for sub in (0, 1)
            for m in METHODS}
    assert len(seen) == 2 * 2 * len(METHODS)
    assert all(0 <= v < 2 ** 32 for v in seen)


def test_config_validation():
    with pytest.raises(HarnessError):
        ExperimentConfig(out_dir="x")            # neither data source
    with pytest.raises(HarnessError):
        ExperimentConfig(out_dir="x", csv_path="a.csv",
                         synthetic=SyntheticSpec(n_assets=4, n_days=100))
    with pytest.raises(HarnessError):
        ExperimentConfig(out_dir="x", csv_path="a.csv", seeds=())
    with pytest.raises(HarnessError):
        ExperimentConfig(out_dir="x", csv_path="a.csv", methods=("nope",))


def test_load_experiment_config(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(
        '[experiment]\nout_dir = "out"\nseeds = [3, 4]\n'
        'methods = ["trials", "ggr"]\n'
        '[data.synthetic]\nn_assets = 6\nn_days = 300\nseed = 9\n'
        '[train]\niterations = 7\nd_h = 16\n')
    cfg = load_experiment_config(str(p))
    assert cfg.seeds == (3, 4)
    assert cfg.methods == ("trials", "ggr")
    assert cfg.synthetic.n_assets == 6
    assert cfg.train.iterations == 7
    assert cfg.train.d_h == 16
    assert cfg.train.gamma == TrainConfig().gamma


def test_load_experiment_config_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_experiment_config(str(tmp_path / "nope.toml"))


def write_metrics(path, rows):
    cols = ["subset", "method", "seed", "pair_i", "pair_j", "profit", "sr",
            "ar", "mdd", "av", "ed", "n_days", "r_f"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def base_row(**kw):
    row = dict(subset=0, method="ggr", seed=0, pair_i=0, pair_j=1, profit=0.0,
               sr=0.0, ar=0.0, mdd=0.0, av=0.0, ed=0.0, n_days=10, r_f=8.5e-05)
    row.update(kw)
    return row


def test_emit_summary_mean_std(tmp_path):
    write_metrics(tmp_path / "metrics.csv",
                  [base_row(seed=0, sr=0.0), base_row(seed=1, sr=2.0),
                   base_row(method="trials", sr=1.5)])
    md = emit_summary(str(tmp_path))
    lines = [l for l in md.splitlines() if l.startswith("|")]
    ggr = next(l for l in lines if "| ggr" in l)
    assert f"1.0000({np.std([0.0, 2.0], ddof=1):.4f})" in ggr.replace(" ", "")
    trials_line = next(l for l in lines if "| trials " in l)
    assert "1.5000(0.0000)" in trials_line.replace(" ", "")
    assert (tmp_path / "summary.md").exists()
    assert (tmp_path / "summary.csv").exists()


def test_emit_summary_requires_rows(tmp_path):
    with pytest.raises(HarnessError):
        emit_summary(str(tmp_path))
    write_metrics(tmp_path / "metrics.csv", [])
    with pytest.raises(HarnessError):
        emit_summary(str(tmp_path))


@pytest.fixture(scope="module")
def tiny_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig(
        out_dir=str(out / "run"),
        synthetic=SyntheticSpec(n_assets=4, n_days=120, seed=3),
        seeds=(0, 1),
        methods=("trials", "ggr", "correlation"),
        train=TrainConfig(iterations=2, inner_episodes=1, d_h=8, d_a=4,
                          eval_cadence=1, history_window=6))
    run_experiment(cfg)
    return cfg, str(out / "run" / "metrics.csv")


def test_run_experiment_grid_complete(tiny_experiment):
    cfg, metrics_path = tiny_experiment
    with open(metrics_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(cfg.seeds) * len(cfg.methods)
    combos = {(r["method"], r["seed"]) for r in rows}
    assert len(combos) == len(rows)
    for r in rows:
        assert r["method"] in cfg.methods
        assert int(r["pair_i"]) < int(r["pair_j"])
        float(r["profit"]), float(r["sr"])  # parseable numerics


def test_run_experiment_rerun_byte_identical(tiny_experiment, tmp_path):
    cfg, metrics_path = tiny_experiment
    cfg2 = ExperimentConfig(
        out_dir=str(tmp_path / "again"), synthetic=cfg.synthetic,
        seeds=cfg.seeds, methods=cfg.methods, train=cfg.train)
    run_experiment(cfg2)
    again = str(tmp_path / "again" / "metrics.csv")
    with open(metrics_path, "rb") as a, open(again, "rb") as b:
        assert a.read() == b.read()
