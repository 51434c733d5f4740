"""Train the two-level system on a small planted universe and watch the
pair-selection policy concentrate.

Scaled down (short formation window, fewer iterations) so it finishes in
about a minute; the acceptance suite runs the full-scale version.

Run:  python demos/02_hierarchical_training.py
"""
import numpy as np

from trials.market_data import PeriodSplit, SyntheticSpec, gen_synthetic_universe
from trials.trainer import TrainConfig, evaluate, greedy_option, train

table = gen_synthetic_universe(SyntheticSpec(n_assets=6, n_days=1000, seed=0))
split = PeriodSplit(formation=range(0, 700), trading=range(700, 800),
                    validation=range(800, 900), test=range(900, 1000))
cfg = TrainConfig(iterations=40, inner_episodes=2, d_h=32, seed=3,
                  eval_cadence=10)

result = train(table, split, cfg)

ext = [r.extrinsic_reward for r in result.log.records]
print(f"extrinsic reward: first 10 mean {np.mean(ext[:10]):+.4f}, "
      f"last 10 mean {np.mean(ext[-10:]):+.4f}")
counts = {}
for r in result.log.records:
    counts[(r.option_i, r.option_j)] = counts.get((r.option_i, r.option_j), 0) + 1
print("options sampled:", sorted(counts.items(), key=lambda kv: -kv[1]))

pair, probs = greedy_option(result.manager, table, split.formation, cfg)
print(f"greedy option after training: ({pair.i},{pair.j}) "
      f"with probability {probs[pair.flat_index]:.3f} (planted pair is (0,1))")

report = evaluate(result.manager, result.worker, table, split, split.test, cfg)
print(f"held-out test episode: profit {report.episode_profit:+.4f}, "
      f"SR {report.metrics.sr:.3f}, MDD {report.metrics.mdd:.4f}")
