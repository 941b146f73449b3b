"""Random GRPO groups for loss and gradient tests."""

from __future__ import annotations

import math

import numpy as np

from rar_forge.policy import logprob
from rar_forge.protocol import INFORMATION_ACTION, PROMPT_ACTION, ActionRecord, Trajectory


def random_group(rng, *, max_actions=5, max_dim=4, max_group=4, max_steps=8, epsilon=0.2, same_old=False):
    """Return ``(trajectories, advantages, theta, ref, temperature)``.

    ``logprob_old`` is the current log-probability shifted by noise unless
    ``same_old``; shifts that land within 1e-3 of a clip boundary are redrawn so
    finite differences never straddle a kink.
    """
    n_actions = int(rng.integers(2, max_actions + 1))
    dim = int(rng.integers(1, max_dim + 1))
    theta = rng.normal(scale=0.7, size=(n_actions, dim))
    ref = theta + rng.normal(scale=0.3, size=theta.shape)
    temperature = float(rng.uniform(0.5, 1.5))
    trajectories = []
    for g in range(int(rng.integers(1, max_group + 1))):
        records = [ActionRecord(0, PROMPT_ACTION, None, False)]
        for _ in range(int(rng.integers(1, max_steps + 1))):
            if rng.random() < 0.25:
                records.append(ActionRecord(len(records), INFORMATION_ACTION, None, False, None, rng.normal(size=dim)))
            allowed = rng.random(n_actions) < 0.8
            action = int(rng.integers(n_actions))
            allowed[action] = True
            phi = rng.normal(size=dim)
            lp = logprob(theta, phi, action, temperature, allowed)
            old = lp
            while not same_old:
                old = min(0.0, lp + float(rng.normal(scale=0.3)))
                rho = math.exp(lp - old)
                if min(abs(rho - (1 - epsilon)), abs(rho - (1 + epsilon))) > 1e-3:
                    break
            records.append(ActionRecord(len(records), action, old, True, None, phi, tuple(bool(x) for x in allowed)))
        trajectories.append(Trajectory(f"t{g}", "q", (), tuple(records), None, 0, True, True))
    adv = rng.normal(size=len(trajectories)).tolist()
    return trajectories, adv, theta, ref, temperature
