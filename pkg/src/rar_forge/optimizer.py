"""Group-relative advantages with a non-personalized baseline, and the clipped GRPO loss.

For a group of personalized rewards ``r_1..r_G`` and the reward ``b`` of one
rollout sampled without retrieval, each personalized rollout gets

    A_i = (r_i - b - mean(r)) / std(r)

where mean and (population) std run over the personalized rewards only. The
loss per step is the clipped surrogate ``min(rho*A, clip(rho, 1-eps, 1+eps)*A)``
with ``rho = pi_theta / pi_old``, plus ``beta`` times the k3 estimate of
KL(pi_theta || pi_ref).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .policy import PolicySnapshot, grad_logprob, logprob

__all__ = [
    "GroupStats",
    "AdvantageVector",
    "GrpoConfig",
    "LossReport",
    "LARGE_MODEL_LEARNING_RATE",
    "group_stats",
    "advantages",
    "kl_step",
    "kl_step_grad",
    "surrogate_step",
    "surrogate_step_grad",
    "grpo_loss",
    "lr_at",
    "warmup_steps",
    "apply_update",
]

LARGE_MODEL_LEARNING_RATE = 1e-6


@dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float


@dataclass(frozen=True)
class AdvantageVector:
    values: tuple[float, ...]
    degenerate: bool


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 5
    beta: float = 0.001
    epsilon: float = 0.2
    # 1e-6 (LARGE_MODEL_LEARNING_RATE) is sized for billion-parameter models; see README.
    learning_rate: float = 1.0
    warmup_ratio: float = 0.285
    total_steps: int = 200
    top_k: int = 3
    temperature: float = 1.0
    use_baseline: bool = True
    sample_baseline: bool = True
    batch_size: int = 1
    update_epochs: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 1:
            raise ValueError("group_size must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.update_epochs < 1:
            raise ValueError("batch_size and update_epochs must be positive")
        if self.use_baseline and not self.sample_baseline:
            raise ValueError("use_baseline requires sample_baseline")


@dataclass(frozen=True)
class LossReport:
    surrogate: float
    kl: float
    total: float
    grad_norm: float
    masked_steps: int
    unmasked_steps: int


# ------------------------------------------------------------- advantages


def group_stats(rewards: Sequence[float]) -> GroupStats:
    """Mean and population standard deviation (divide by G)."""
    values = [float(r) for r in rewards]
    if not values:
        raise ValueError("group is empty")
    n = len(values)
    mean = math.fsum(values) / n
    if all(v == values[0] for v in values):
        return GroupStats(mean=values[0], std=0.0)
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return GroupStats(mean=mean, std=math.sqrt(var))


def advantages(
    rewards: Sequence[float],
    baseline_reward: float,
    stats: GroupStats,
    use_baseline: bool = True,
) -> AdvantageVector:
    """Baseline-relative, group-normalized advantages; all zero when the group has no spread."""
    if len(rewards) == 0:
        raise ValueError("group is empty")
    if stats.std <= 0.0:
        return AdvantageVector(values=(0.0,) * len(rewards), degenerate=True)
    b = float(baseline_reward) if use_baseline else 0.0
    return AdvantageVector(
        values=tuple((float(r) - b - stats.mean) / stats.std for r in rewards),
        degenerate=False,
    )


# ------------------------------------------------------------ per-step terms


def _check_finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise ValueError(f"non-finite input {x!r}")


def kl_step(logp_theta: float, logp_ref: float) -> float:
    """k3 estimator: ``rho - log(rho) - 1`` with ``rho = pi_ref / pi_theta``."""
    _check_finite(logp_theta, logp_ref)
    d = logp_ref - logp_theta
    return max(0.0, math.expm1(d) - d)


def kl_step_grad(logp_theta: float, logp_ref: float) -> float:
    """d kl_step / d logp_theta."""
    return -math.expm1(logp_ref - logp_theta)


def surrogate_step(logp_theta: float, logp_old: float, advantage: float, epsilon: float) -> float:
    _check_finite(logp_theta, logp_old, advantage)
    rho = math.exp(logp_theta - logp_old)
    clipped = min(max(rho, 1.0 - epsilon), 1.0 + epsilon)
    return min(rho * advantage, clipped * advantage)


def surrogate_step_grad(logp_theta: float, logp_old: float, advantage: float, epsilon: float) -> float:
    """d surrogate_step / d logp_theta; zero wherever the clipped branch is the active minimum."""
    rho = math.exp(logp_theta - logp_old)
    clipped = min(max(rho, 1.0 - epsilon), 1.0 + epsilon)
    if rho * advantage <= clipped * advantage:
        return rho * advantage
    return 0.0


# ------------------------------------------------------------------- loss


def _unpack_group(group: Any) -> tuple[list, list[float]]:
    if hasattr(group, "personalized"):
        trajectories = [record.trajectory for record in group.personalized]
        values = list(group.advantages.values)
    else:
        trajectories, values = group
        trajectories = list(trajectories)
        values = list(values)
    if len(trajectories) != len(values):
        raise ValueError("one advantage per trajectory required")
    return trajectories, values


def grpo_loss(
    group: Any,
    policy_params: np.ndarray,
    reference_snapshot: PolicySnapshot | np.ndarray,
    config: GrpoConfig,
) -> tuple[LossReport, np.ndarray]:
    """Loss and gradient for one group.

    ``group`` is a ``GroupRollout`` or a ``(trajectories, advantages)`` pair.
    Each trajectory contributes the mean over its loss-masked steps, and the
    group loss is the mean over trajectories (minimization convention:
    ``total = -surrogate + beta * kl``). Steps with ``loss_mask=False`` are
    skipped entirely.
    """
    trajectories, adv = _unpack_group(group)
    if not trajectories:
        raise ValueError("group is empty")
    theta = np.asarray(policy_params, dtype=np.float64)
    ref = reference_snapshot.params if isinstance(reference_snapshot, PolicySnapshot) else np.asarray(reference_snapshot)
    temperature = config.temperature
    eps, beta = config.epsilon, config.beta

    grad = np.zeros_like(theta)
    surrogate_sum = kl_sum = 0.0
    masked = unmasked = 0
    for traj, a in zip(trajectories, adv):
        steps = [r for r in traj.actions if r.loss_mask]
        masked += len(traj.actions) - len(steps)
        unmasked += len(steps)
        if not steps:
            raise ValueError(f"trajectory {traj.trajectory_id} has no policy steps to score")
        s_tot = k_tot = 0.0
        g_traj = np.zeros_like(theta)
        for r in steps:
            lp = logprob(theta, r.features, r.action_id, temperature, r.allowed)
            lp_ref = logprob(ref, r.features, r.action_id, temperature, r.allowed)
            s_tot += surrogate_step(lp, r.logprob_old, a, eps)
            k_tot += kl_step(lp, lp_ref)
            coeff = -surrogate_step_grad(lp, r.logprob_old, a, eps) + beta * kl_step_grad(lp, lp_ref)
            if coeff != 0.0:
                g_traj += coeff * grad_logprob(theta, r.features, r.action_id, temperature, r.allowed)
        n = len(steps)
        surrogate_sum += s_tot / n
        kl_sum += k_tot / n
        grad += g_traj / n

    g = len(trajectories)
    grad /= g
    surrogate, kl = surrogate_sum / g, kl_sum / g
    report = LossReport(
        surrogate=surrogate,
        kl=kl,
        total=-surrogate + beta * kl,
        grad_norm=float(np.linalg.norm(grad)),
        masked_steps=masked,
        unmasked_steps=unmasked,
    )
    return report, grad


# --------------------------------------------------------------- schedule


def warmup_steps(config: GrpoConfig) -> int:
    # round first so 0.3 * 10 == 3.0000000000000004 does not ceil to 4
    return math.ceil(round(config.warmup_ratio * config.total_steps, 9))


def lr_at(step: int, config: GrpoConfig) -> float:
    """Linear warmup over ``ceil(warmup_ratio * total_steps)`` steps, then constant.

    Step ``s`` (0-based) gets ``lr * min(1, (s + 1) / W)``, so the first update
    already uses a positive rate and step ``W - 1`` reaches the full rate.
    """
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    w = warmup_steps(config)
    if w == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, (step + 1) / w)


def apply_update(policy_params: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(policy_params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ValueError(f"shape mismatch {params.shape} vs {gradient.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = int(np.count_nonzero(~np.isfinite(gradient)))
        raise FloatingPointError(f"non-finite gradient ({bad} entries); update aborted")
    return params - lr * gradient
