"""Hierarchical loop bookkeeping: log shape, snapshot cadence, determinism,
ablation paths."""
import json

import numpy as np
import pytest

from trials.market_data import PeriodSplit
from trials.trading_env import PairOption, episode_return, n_pairs
from trials.trainer import (TrainConfig, evaluate, evaluate_worker_on_pair,
                            greedy_option, run_ablation_wo_tr, train,
                            train_worker_on_pair)

from conftest import make_table


def tiny_cfg(**kw):
    base = dict(iterations=6, inner_episodes=2, d_h=8, d_a=4, seed=5,
                eval_cadence=2, history_window=6)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained():
    table = make_table(n_assets=3, n_days=120, seed=2)
    split = PeriodSplit(formation=range(0, 60), trading=range(60, 80),
                        validation=range(80, 100), test=range(100, 120))
    cfg = tiny_cfg()
    return table, split, cfg, train(table, split, cfg)


def test_log_counts_and_fields(trained):
    table, split, cfg, result = trained
    assert len(result.log) == cfg.iterations
    for k, rec in enumerate(result.log.records, start=1):
        assert rec.iteration == k
        assert len(rec.intrinsic_returns) == cfg.inner_episodes
        assert 0 <= rec.option_flat < n_pairs(table.n_assets)
        assert rec.option_i < rec.option_j
        assert np.isfinite(rec.extrinsic_reward)
        assert rec.wall_clock > 0


def test_snapshot_cadence(trained):
    _, _, cfg, result = trained
    assert [s.iteration for s in result.snapshots] == [2, 4, 6]
    sizes = {(s.manager_flat.size, s.worker_flat.size) for s in result.snapshots}
    assert len(sizes) == 1
    assert not np.array_equal(result.snapshots[0].worker_flat,
                              result.snapshots[-1].worker_flat)


def test_training_is_deterministic(trained, tmp_path):
    table, split, cfg, result = trained
    again = train(table, split, cfg)
    assert np.array_equal(result.snapshots[-1].worker_flat,
                          again.snapshots[-1].worker_flat)
    assert np.array_equal(result.snapshots[-1].manager_flat,
                          again.snapshots[-1].manager_flat)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    result.log.to_jsonl(p1)
    again.log.to_jsonl(p2)
    assert p1.read_bytes() == p2.read_bytes()
    rec = json.loads(p1.read_text().splitlines()[0])
    assert "wall_clock" not in rec
    assert rec["iteration"] == 1


def test_seed_changes_trajectory(trained):
    table, split, cfg, result = trained
    other = train(table, split, tiny_cfg(seed=6))
    assert not np.array_equal(result.snapshots[-1].worker_flat,
                              other.snapshots[-1].worker_flat)


def test_threshold_trade_mode_skips_worker(trained):
    table, split, _, _ = trained
    cfg = tiny_cfg(trade_mode="threshold")
    result = train(table, split, cfg)
    assert len(result.log) == cfg.iterations
    for rec in result.log.records:
        assert rec.intrinsic_returns == []
    # the worker never runs, so its parameters stay at initialization
    fresh = train(table, split, tiny_cfg(trade_mode="threshold", iterations=1))
    assert np.array_equal(result.snapshots[-1].worker_flat,
                          fresh.snapshots[-1].worker_flat)


def test_evaluate_report_is_consistent(trained):
    table, split, cfg, result = trained
    rep = evaluate(result.manager, result.worker, table, split, split.test, cfg)
    assert len(rep.rewards) == len(split.test) - 1
    assert len(rep.actions) == len(rep.rewards) + 1  # includes initial C
    assert rep.actions[-1] == "C"
    assert rep.episode_profit == pytest.approx(
        episode_return(rep.rewards).profit, abs=1e-15)
    assert rep.option_probs.sum() == pytest.approx(1.0, abs=1e-12)
    opt, probs = greedy_option(result.manager, table, split.formation, cfg)
    assert (rep.pair.i, rep.pair.j) == (opt.i, opt.j)
    assert rep.pair.flat_index == int(np.argmax(probs))


def test_evaluate_does_not_mutate_parameters(trained):
    table, split, cfg, result = trained
    before_w = result.worker.store.pack()
    before_m = result.manager.store.pack()
    evaluate(result.manager, result.worker, table, split, split.test, cfg)
    assert np.array_equal(result.worker.store.pack(), before_w)
    assert np.array_equal(result.manager.store.pack(), before_m)


def test_evaluate_export_writes_artifacts(trained, tmp_path):
    table, split, cfg, result = trained
    out = tmp_path / "eval"
    evaluate(result.manager, result.worker, table, split, split.test, cfg,
             export_dir=out)
    assert (out / "trajectory.csv").exists()
    assert (out / "pair_probs.csv").exists()
    named = list(out.glob("attention_*.csv"))
    # one per asset plus one for the traded pair
    assert len(named) == table.n_assets + 1


def test_ablation_wo_tr_uses_same_pair(trained):
    table, split, cfg, result = trained
    rep = run_ablation_wo_tr(result.manager, table, split, split.test, cfg)
    opt, _ = greedy_option(result.manager, table, split.formation, cfg)
    assert (rep.pair.i, rep.pair.j) == (opt.i, opt.j)
    assert set(rep.actions) <= {"L", "C", "S"}
    assert len(rep.rewards) == len(split.test) - 1


def test_train_worker_on_pair(trained):
    table, split, cfg, _ = trained
    pair = PairOption(0, 2, table.n_assets)
    worker, snapshots, log = train_worker_on_pair(table, split, pair, cfg)
    assert len(log) == cfg.iterations
    assert [s.iteration for s in snapshots] == [2, 4, 6]
    assert snapshots[0].manager_flat.size == 0
    rep = evaluate_worker_on_pair(worker, table, pair, split.test, cfg,
                                  formation=split.formation)
    assert (rep.pair.i, rep.pair.j) == (0, 2)
    assert len(rep.rewards) == len(split.test) - 1
    assert rep.actions[-1] == "C"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(trade_mode="banana")
    with pytest.raises(ValueError):
        TrainConfig(lr_worker=-1.0)
