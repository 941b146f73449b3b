"""Train the toy policy on a synthetic world and watch it learn to search.

Every rubric keyphrase lives only in the user's profile, so an answer written
without retrieval scores zero. The policy starts out mostly answering straight
away; GRPO with the non-personalized baseline pushes it toward searching first.

    python3 demos/quickstart.py
"""

import statistics

import numpy as np

from rar_forge.dataset import SyntheticWorldConfig, generate_synthetic
from rar_forge.optimizer import GrpoConfig
from rar_forge.retrieval import RetrievalConfig
from rar_forge.trainer import Environment, evaluate, rollout_personalized, train

world = generate_synthetic(SyntheticWorldConfig(num_users=50, seed=0))
env = Environment(world)
config = GrpoConfig()

print(f"{len(world)} users, {len(env.vocab)} macro-actions, feature dim {env.features.dimension}")
print("untrained eval:", evaluate(world, env.init_params(), config, seed=0, env=env))

params, metrics = train(world, config, seed=0, env=env)

print("\nstep  reward  baseline  retrievals")
for m in metrics[::20] + metrics[-1:]:
    print(f"{m.step:4d}  {m.mean_reward:6.3f}  {m.baseline_reward:8.3f}  {m.mean_retrievals:10.2f}")
print("last-20 mean reward:", round(statistics.fmean(m.mean_reward for m in metrics[-20:]), 3))
print("trained eval:", evaluate(world, params, config, seed=0, env=env))

# one rollout from the trained policy, rendered as text
instance = world[0]
record = rollout_personalized(
    instance, env.policy(params), env.index_for(instance), env.protocol, RetrievalConfig(3), np.random.default_rng(1)
)
print("\nquestion:", instance.question)
for segment in record.trajectory.segments:
    print(segment.render())
print("reward:", record.reward.normalized)
