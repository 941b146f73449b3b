"""Walk through one GRPO update on a hand-built group.

Two trajectories answer the same question. One searched and earned reward
1.0, the other answered directly and earned 0. The baseline scored 0.5.
"""

import math

from rar_forge.optimizer import GrpoConfig, advantages, group_stats, kl_step, lr_at, surrogate_step, warmup_steps

rewards = [1.0, 0.0]
stats = group_stats(rewards)
print(f"group mean {stats.mean}, population std {stats.std}")

adv = advantages(rewards, 0.5, stats)
print("advantages with baseline 0.5:", adv.values)  # (1 - 0.5 - 0.5)/0.5 = 0, (0 - 0.5 - 0.5)/0.5 = -2
print("advantages without baseline:", advantages(rewards, 0.5, stats, use_baseline=False).values)

# clipping: the ratio is capped at 1 + eps when the advantage is positive
for rho in (0.5, 1.0, 1.1, 2.0):
    print(f"rho={rho:<4} A=+1 -> {surrogate_step(math.log(rho), 0.0, 1.0, 0.2):.3f}"
          f"   A=-1 -> {surrogate_step(math.log(rho), 0.0, -1.0, 0.2):.3f}")

# k3 KL is zero at equality and grows on either side
for gap in (-1.0, -0.1, 0.0, 0.1, 1.0):
    print(f"log pi_ref - log pi = {gap:+.1f}  kl = {kl_step(-1.0, -1.0 + gap):.4f}")

config = GrpoConfig()
print("warmup length:", warmup_steps(config), "steps")
for step in (0, 28, 56, 199):
    print(f"lr at step {step}: {lr_at(step, config):.4f}")
