"""Experiment orchestration: asset subsets, the (subset, seed, method) matrix,
metrics.csv / summary emission, and per-cell artifact export.

Methods: "trials" (hierarchical RL), "trials_wo_tr" (RL pair selection +
threshold trading), "ggr" (distance selection + threshold), "correlation",
"cointegration", and "coint_rl" (cointegration selection + RL trading).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .baselines import (coint_select, corr_select, export_pair_ranking,
                        fit_spread_model, ssd_select, threshold_trade)
from .market_data import (PriceTable, SyntheticSpec, gen_synthetic_universe,
                          load_price_table, split_periods)
from .metrics import compute_report
from .trading_env import episode_return
from .trainer import (Snapshot, TrainConfig, WorkerRuntime, evaluate,
                      evaluate_worker_on_pair, run_ablation_wo_tr, train,
                      train_worker_on_pair)

METHODS = ("trials", "trials_wo_tr", "ggr", "correlation", "cointegration",
           "coint_rl")
METRIC_COLUMNS = ("sr", "ar", "mdd", "av", "ed")


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str
    csv_path: str | None = None
    csv_schema: str = "long"
    synthetic: SyntheticSpec | None = None
    n_subsets: int = 1
    subset_size: int | None = None      # None = all assets in one subset
    subset_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = METHODS
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.seeds:
            raise HarnessError("need at least one seed")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise HarnessError(f"unknown methods: {sorted(unknown)}")
        if (self.csv_path is None) == (self.synthetic is None):
            raise HarnessError("exactly one of csv_path / synthetic required")


def load_experiment_config(path: str) -> ExperimentConfig:
    """Parse a TOML experiment file; every TrainConfig default may be
    overridden in the [train] section."""
    try:
        import tomllib as toml
    except ImportError:
        import tomli as toml

    with open(path, "rb") as f:
        doc = toml.load(f)
    data = doc.get("data", {})
    synth = None
    if "synthetic" in data:
        synth = SyntheticSpec(**data["synthetic"])
    train_cfg = TrainConfig(**doc.get("train", {}))
    exp = doc.get("experiment", {})
    return ExperimentConfig(
        out_dir=exp.get("out_dir", "results"),
        csv_path=data.get("csv_path"),
        csv_schema=data.get("csv_schema", "long"),
        synthetic=synth,
        n_subsets=exp.get("n_subsets", 1),
        subset_size=exp.get("subset_size"),
        subset_seed=exp.get("subset_seed", 0),
        seeds=tuple(exp.get("seeds", [0])),
        methods=tuple(exp.get("methods", list(METHODS))),
        train=train_cfg)


def make_subsets(assets: list[str], k: int, size: int,
                 seed: int = 0) -> list[list[str]]:
    """Seeded shuffle then chunk into k disjoint lists of the given size."""
    if k * size > len(assets):
        raise HarnessError(
            f"need {k * size} assets for {k} subsets of {size}, have {len(assets)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(assets)))
    return [[assets[order[s * size + i]] for i in range(size)] for s in range(k)]


def cell_seed(base_seed: int, subset: int, method: str) -> int:
    """Deterministic independent seed per experiment cell."""
    key = f"{base_seed}:{subset}:{method}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def _select_best_snapshot(snapshots: list[Snapshot], score) -> Snapshot:
    """Highest validation score wins; ties go to the earliest snapshot."""
    best, best_s = None, -np.inf
    for snap in snapshots:
        s = score(snap)
        if s > best_s:
            best, best_s = snap, s
    return best


def _threshold_cell(table: PriceTable, split, pair, cfg: TrainConfig):
    model = fit_spread_model(table, pair, split.formation, kind=cfg.spread_kind)
    if model.sigma <= 0:
        return [], [0.0]
    actions, rewards = threshold_trade(pair, model, table, split.test,
                                       k_open=cfg.k_open, k_close=cfg.k_close,
                                       cost=cfg.cost)
    return actions, rewards


def run_cell(table: PriceTable, split, method: str, seed: int,
             cfg: TrainConfig, out_dir: str | None = None) -> dict:
    """One (subset, seed, method) cell: pair selection + trading on the test
    window, with validation-based snapshot selection for RL methods."""
    cfg = dataclasses.replace(cfg, seed=seed)
    if method == "trials":
        result = train(table, split, cfg)

        def val_score(snap):
            result.manager.store.load_flat(snap.manager_flat)
            result.worker.store.load_flat(snap.worker_flat)
            rep = evaluate(result.manager, result.worker, table, split,
                           split.validation, cfg)
            return rep.metrics.sr

        best = _select_best_snapshot(result.snapshots, val_score)
        result.manager.store.load_flat(best.manager_flat)
        result.worker.store.load_flat(best.worker_flat)
        rep = evaluate(result.manager, result.worker, table, split, split.test,
                       cfg, export_dir=out_dir)
        if out_dir is not None:
            result.log.to_jsonl(os.path.join(out_dir, "train_log.jsonl"))
        pair, rewards = rep.pair, rep.rewards
    elif method == "trials_wo_tr":
        cfg_tr = dataclasses.replace(cfg, trade_mode="threshold")
        result = train(table, split, cfg_tr)

        def val_score(snap):
            result.manager.store.load_flat(snap.manager_flat)
            rep = run_ablation_wo_tr(result.manager, table, split, split.validation,
                                     cfg_tr)
            return rep.metrics.sr

        best = _select_best_snapshot(result.snapshots, val_score)
        result.manager.store.load_flat(best.manager_flat)
        rep = run_ablation_wo_tr(result.manager, table, split, split.test, cfg_tr)
        if out_dir is not None:
            result.log.to_jsonl(os.path.join(out_dir, "train_log.jsonl"))
        pair, rewards = rep.pair, rep.rewards
    elif method in ("ggr", "correlation", "cointegration"):
        if method == "ggr":
            ranked = ssd_select(table, split.formation)
        elif method == "correlation":
            ranked = corr_select(table, split.formation)
        else:
            ranked = coint_select(table, split.formation)
        if out_dir is not None:
            export_pair_ranking(os.path.join(out_dir, "pair_ranking.csv"),
                                {method: ranked})
        pair = ranked[0][0]
        _, rewards = _threshold_cell(table, split, pair, cfg)
    elif method == "coint_rl":
        ranked = coint_select(table, split.formation)
        if out_dir is not None:
            export_pair_ranking(os.path.join(out_dir, "pair_ranking.csv"),
                                {"cointegration": ranked})
        pair = ranked[0][0]
        worker, snapshots, _ = train_worker_on_pair(table, split, pair, cfg)

        def val_score(snap):
            worker.store.load_flat(snap.worker_flat)
            rep = evaluate_worker_on_pair(worker, table, pair, split.validation, cfg,
                                          formation=split.formation)
            return rep.metrics.sr

        best = _select_best_snapshot(snapshots, val_score)
        worker.store.load_flat(best.worker_flat)
        rep = evaluate_worker_on_pair(worker, table, pair, split.test, cfg,
                                      formation=split.formation)
        rewards = rep.rewards
    else:
        raise HarnessError(f"unknown method {method!r}")

    report = compute_report(rewards, table=table, pair=pair,
                            window=split.formation)
    out = {"method": method, "seed": seed,
           "pair_i": pair.i, "pair_j": pair.j,
           "profit": episode_return(list(rewards)).profit}
    out.update(report.as_dict())
    return out


def _run_cell_task(args):
    sub, split, method, seed, train_cfg, cell_dir = args
    return run_cell(sub, split, method, seed, train_cfg, out_dir=cell_dir)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> str:
    """Full matrix; returns the output directory.  With jobs == 1 metrics.csv
    is flushed after every completed cell; with jobs > 1 independent cells run
    in a process pool and rows land as they finish (matrix order preserved in
    the file)."""
    if cfg.synthetic is not None:
        table = gen_synthetic_universe(cfg.synthetic)
    else:
        table, _ = load_price_table(cfg.csv_path, schema=cfg.csv_schema)
    size = cfg.subset_size or table.n_assets // cfg.n_subsets
    subsets = make_subsets(list(table.assets), cfg.n_subsets, size,
                           cfg.subset_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)

    tasks = []
    for s_idx, names in enumerate(subsets):
        sub = table.select_assets(names)
        split = split_periods(sub.n_days)
        for base_seed in cfg.seeds:
            for method in cfg.methods:
                cell_dir = os.path.join(cfg.out_dir, f"subset{s_idx}",
                                        f"seed{base_seed}", method)
                os.makedirs(cell_dir, exist_ok=True)
                tasks.append(((sub, split, method,
                               cell_seed(base_seed, s_idx, method),
                               cfg.train, cell_dir), s_idx, base_seed))

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    header = ["subset", "method", "seed", "pair_i", "pair_j", "profit",
              *METRIC_COLUMNS, "n_days", "r_f"]
    with open(metrics_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_cell_task, [t for t, _, _ in tasks]))
        else:
            results = None
        for idx, (task, s_idx, base_seed) in enumerate(tasks):
            res = results[idx] if results is not None else _run_cell_task(task)
            writer.writerow([s_idx, res["method"], base_seed,
                             res["pair_i"], res["pair_j"], repr(float(res["profit"])),
                             *[repr(float(res[c])) for c in METRIC_COLUMNS],
                             res["n_days"], repr(float(res["r_f"]))])
            f.flush()
    emit_summary(cfg.out_dir)
    return cfg.out_dir


def emit_summary(out_dir: str) -> str:
    """Per-method Mean(Std) over all (subset, seed) cells; writes summary.csv
    and summary.md, returns the markdown text."""
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise HarnessError(f"no metrics.csv in {out_dir}")
    with open(metrics_path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise HarnessError("metrics.csv is empty")
    methods = sorted({r["method"] for r in rows},
                     key=lambda m: METHODS.index(m) if m in METHODS else 99)
    lines = ["| method | " + " | ".join(c.upper() for c in METRIC_COLUMNS) + " |",
             "|" + "---|" * (len(METRIC_COLUMNS) + 1)]
    csv_rows = []
    for m in methods:
        vals = {c: np.array([float(r[c]) for r in rows if r["method"] == m])
                for c in METRIC_COLUMNS}
        cells = []
        csv_row = {"method": m}
        for c in METRIC_COLUMNS:
            mean = vals[c].mean()
            std = vals[c].std(ddof=1) if len(vals[c]) > 1 else 0.0
            cells.append(f"{mean:.4f}({std:.4f})")
            csv_row[f"{c}_mean"] = mean
            csv_row[f"{c}_std"] = std
        csv_rows.append(csv_row)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    md = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "summary.md"), "w", encoding="utf-8") as f:
        f.write(md)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="",
              encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(csv_rows[0]))
        w.writeheader()
        w.writerows(csv_rows)
    return md
