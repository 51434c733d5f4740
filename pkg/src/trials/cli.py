"""Command-line entry point.

    trials run    --config exp.toml [--jobs K]
    trials synth  --spec spec.toml --out prices.csv
    trials eval   --snapshot snap.npz --data prices.csv [--period test]
    trials report <results-dir>

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .market_data import (DataError, SyntheticSpec, gen_synthetic_universe,
                          load_price_table, save_price_table, split_periods)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trials",
                                description="pair-trading research engine")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full experiment matrix")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1,
                     help="worker processes for independent cells")

    synth = sub.add_parser("synth", help="generate a synthetic price panel")
    synth.add_argument("--spec", required=True, help="TOML [synthetic] spec")
    synth.add_argument("--out", required=True, help="output CSV (long schema)")

    ev = sub.add_parser("eval", help="evaluate a saved snapshot")
    ev.add_argument("--snapshot", required=True, help=".npz from save_snapshot")
    ev.add_argument("--data", required=True, help="price CSV (long schema)")
    ev.add_argument("--period", default="test",
                    choices=("formation", "trading", "validation", "test"))

    rep = sub.add_parser("report", help="re-emit the summary for a results dir")
    rep.add_argument("dir")
    return p


def save_snapshot(path: str, snap, cfg) -> None:
    """Persist one training snapshot plus the config needed to rebuild nets."""
    np.savez(path, manager_flat=snap.manager_flat, worker_flat=snap.worker_flat,
             iteration=snap.iteration,
             config_json=np.array(_cfg_json(cfg)))


def _cfg_json(cfg) -> str:
    import json
    return json.dumps(dataclasses.asdict(cfg))


def load_snapshot(path: str):
    import json

    from .trainer import Snapshot, TrainConfig
    with np.load(path, allow_pickle=False) as z:
        snap = Snapshot(iteration=int(z["iteration"]),
                        manager_flat=z["manager_flat"],
                        worker_flat=z["worker_flat"])
        raw = json.loads(str(z["config_json"]))
    cfg = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in raw.items()})
    return snap, cfg


def _cmd_run(args) -> int:
    from .harness import HarnessError, load_experiment_config, run_experiment
    try:
        cfg = load_experiment_config(args.config)
    except (OSError, HarnessError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = run_experiment(cfg, jobs=args.jobs)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out}/metrics.csv")
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        import tomllib as toml
    except ImportError:
        import tomli as toml
    try:
        with open(args.spec, "rb") as f:
            doc = toml.load(f)
        spec = SyntheticSpec(**doc.get("synthetic", doc))
    except (OSError, toml.TOMLDecodeError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    table = gen_synthetic_universe(spec)
    save_price_table(table, args.out)
    print(f"wrote {args.out} ({table.n_assets} assets x {table.n_days} days)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .manager import ManagerNet
    from .trainer import evaluate
    from .worker import WorkerNet
    try:
        snap, cfg = load_snapshot(args.snapshot)
    except (OSError, KeyError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        table, dropped = load_price_table(args.data)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if dropped:
        print(f"dropped incomplete assets: {', '.join(dropped)}", file=sys.stderr)
    split = split_periods(table.n_days)
    rng = np.random.default_rng(cfg.seed)
    manager = ManagerNet.create(cfg.d_h, rng)
    worker = WorkerNet.create(cfg.d_h, cfg.d_a, rng,
                              history_window=cfg.history_window)
    manager.store.load_flat(snap.manager_flat)
    worker.store.load_flat(snap.worker_flat)
    rep = evaluate(manager, worker, table, split, getattr(split, args.period), cfg)
    if not np.isfinite(rep.episode_profit):
        print("numeric failure: non-finite episode profit", file=sys.stderr)
        return EXIT_NUMERIC
    pair = f"{table.assets[rep.pair.i]}/{table.assets[rep.pair.j]}"
    print(f"pair={pair} profit={rep.episode_profit:.6f}")
    for k, v in rep.metrics.as_dict().items():
        print(f"{k}={v}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .harness import HarnessError, emit_summary
    try:
        md = emit_summary(args.dir)
    except (HarnessError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(md, end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "synth": _cmd_synth,
               "eval": _cmd_eval, "report": _cmd_report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
