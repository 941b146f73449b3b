"""Compare training with and without the non-personalized baseline term.

Each arm runs five seeds; the median of the last-20 mean reward is reported.
In this world the baseline can never score (it cannot search and the prompt
carries no keyphrases), so its reward is 0 and the two arms coincide step for
step. The comparison therefore comes out equal, which is what it should be.

    python3 demos/ablation.py
"""

import statistics

from rar_forge.dataset import SyntheticWorldConfig, generate_synthetic
from rar_forge.optimizer import GrpoConfig
from rar_forge.trainer import Environment, train

world = generate_synthetic(SyntheticWorldConfig(num_users=50, seed=0))
env = Environment(world)

finals = {}
for use_baseline in (True, False):
    scores = []
    for seed in range(5):
        _, metrics = train(world, GrpoConfig(use_baseline=use_baseline), seed, env=env)
        scores.append(statistics.fmean(m.mean_reward for m in metrics[-20:]))
        assert all(m.baseline_reward == 0.0 for m in metrics)
    finals[use_baseline] = scores
    print(f"use_baseline={use_baseline!s:5}  per-seed {[round(s, 3) for s in scores]}  median {statistics.median(scores):.3f}")

print("identical arms:", finals[True] == finals[False])
