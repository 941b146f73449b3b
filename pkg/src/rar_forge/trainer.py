"""Rollouts with interleaved retrieval, the non-personalized baseline, and the training loop."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import TrainingInstance
from .optimizer import (
    AdvantageVector,
    GrpoConfig,
    LossReport,
    advantages,
    apply_update,
    group_stats,
    grpo_loss,
    lr_at,
)
from .policy import (
    ActionVocabulary,
    FeatureMap,
    PolicySnapshot,
    RolloutContext,
    SoftmaxPolicy,
    init_params,
    snapshot,
)
from .protocol import (
    INFORMATION_ACTION,
    PROMPT_ACTION,
    ActionRecord,
    Answer,
    Information,
    Phase,
    ProtocolConfig,
    ProtocolError,
    RolloutState,
    Search,
    Segment,
    Think,
    Trajectory,
    advance,
)
from .retrieval import Embedder, HashedBowEmbedder, ProfileIndex, RetrievalConfig, build_index, format_information, search
from .reward import Judge, RewardRecord, SyntheticJudge, reward_trajectory

logger = logging.getLogger(__name__)

__all__ = [
    "RolloutRecord",
    "GroupRollout",
    "TrainMetrics",
    "METRICS_COLUMNS",
    "Environment",
    "run_rollout",
    "rollout_personalized",
    "rollout_baseline",
    "train_step",
    "train",
    "evaluate",
    "write_metrics_csv",
    "read_metrics_csv",
]


@dataclass(frozen=True)
class RolloutRecord:
    trajectory: Trajectory
    reward: RewardRecord

    def __post_init__(self) -> None:
        if self.reward.trajectory_id != self.trajectory.trajectory_id:
            raise ValueError("reward does not belong to this trajectory")


@dataclass(frozen=True)
class GroupRollout:
    instance_id: str
    personalized: tuple[RolloutRecord, ...]
    baseline: RolloutRecord | None
    advantages: AdvantageVector
    loss: LossReport | None = None

    @property
    def rewards(self) -> list[float]:
        return [r.reward.normalized for r in self.personalized]

    @property
    def baseline_reward(self) -> float:
        return 0.0 if self.baseline is None else self.baseline.reward.normalized


@dataclass(frozen=True)
class TrainMetrics:
    step: int
    mean_reward: float
    baseline_reward: float
    mean_retrievals: float
    mean_response_len: float
    loss: float
    kl: float
    lr: float
    degenerate_groups: int


METRICS_COLUMNS = tuple(f.name for f in fields(TrainMetrics))


class Environment:
    """Dataset plus everything a rollout needs: indexes, judge, action space, features.

    The search vocabulary defaults to the sorted set of rubric-aspect ids in the
    dataset, which for synthetic worlds are the attribute names.
    """

    def __init__(
        self,
        instances: Sequence[TrainingInstance],
        *,
        query_terms: Sequence[str] | None = None,
        protocol: ProtocolConfig | None = None,
        embedder: Embedder | None = None,
        judge: Judge | None = None,
    ):
        if not instances:
            raise ValueError("dataset is empty")
        self.instances = list(instances)
        self.protocol = protocol or ProtocolConfig()
        self.embedder = embedder or HashedBowEmbedder()
        self.judge = judge or SyntheticJudge()
        if query_terms is None:
            query_terms = sorted({a.id for inst in self.instances for a in inst.aspects})
        self.vocab = ActionVocabulary(query_terms)
        self.features = FeatureMap(self.vocab.query_terms, self.protocol.max_search_turns)
        self._indexes: dict[str, ProfileIndex] = {}

    def index_for(self, instance: TrainingInstance) -> ProfileIndex:
        key = instance.profile.user_id
        index = self._indexes.get(key)
        if index is None or index.doc_refs != instance.profile.documents:
            index = build_index(instance.profile, self.embedder)
            self._indexes[key] = index
        return index

    def init_params(self) -> np.ndarray:
        return init_params(self.vocab, self.features)

    def policy(self, params, temperature: float = 1.0, greedy: bool = False) -> SoftmaxPolicy:
        return SoftmaxPolicy(self.vocab, self.features, params, temperature, greedy)


# ------------------------------------------------------------------ rollouts


def run_rollout(
    instance: TrainingInstance,
    policy,
    *,
    index: ProfileIndex | None,
    protocol_config: ProtocolConfig,
    retrieval_config: RetrievalConfig,
    rng: np.random.Generator,
    judge: Judge,
    personalized: bool,
    trajectory_id: str,
) -> RolloutRecord:
    """Sample one trajectory, alternating policy segments with injected retrieval results.

    A protocol violation ends the rollout as truncated (reward 0) instead of
    raising; the offending action stays in the record so the loss can push its
    probability down.
    """
    vocab: ActionVocabulary = policy.vocab
    allowed = vocab.allowed(allow_search=personalized)
    ctx = RolloutContext(instance.question)
    state = RolloutState.initial(protocol_config, prompt_steps=1)
    records: list[ActionRecord] = [ActionRecord(0, PROMPT_ACTION, None, False)]
    segments: list[Segment] = []
    error = None

    while not state.terminal:
        decision = policy.act(ctx, rng, allowed)
        segment = vocab.render(decision.action_id, ctx)
        try:
            next_state = advance(state, segment)
        except ProtocolError as exc:
            records.append(
                ActionRecord(len(records), decision.action_id, decision.logprob, True, None, decision.features, allowed)
            )
            state = replace(state, phase=Phase.TERMINAL, truncated=True)
            error = str(exc)
            break
        if next_state.truncated:
            state = next_state
            break
        records.append(
            ActionRecord(
                len(records), decision.action_id, decision.logprob, True, len(segments), decision.features, allowed
            )
        )
        segments.append(segment)
        state = next_state

        if isinstance(segment, Think):
            ctx.last_kind = "think"
        elif isinstance(segment, Search):
            if index is None:
                raise RuntimeError("personalized rollout requires a profile index")
            ctx.searches.append(segment.text)
            results = search(index, segment.text, retrieval_config.top_k)
            info = Information(format_information(results))
            next_state = advance(state, info, injected=True)
            if next_state.truncated:
                # no room for the retrieved text: the search turn never completed
                segments.pop()
                records[-1] = replace(records[-1], segment_index=None)
                state = next_state
                break
            records.append(ActionRecord(len(records), INFORMATION_ACTION, None, False, len(segments)))
            segments.append(info)
            state = next_state
            ctx.observe([doc for doc, _ in results])

    truncated = state.truncated
    answer = None
    if not truncated and segments and isinstance(segments[-1], Answer):
        answer = segments[-1].text
    trajectory = Trajectory(
        trajectory_id=trajectory_id,
        instance_id=instance.id,
        segments=tuple(segments),
        actions=tuple(records),
        answer_text=answer,
        retrieval_count=sum(isinstance(s, Search) for s in segments),
        truncated=truncated,
        personalized=personalized,
        error=error,
    )
    return RolloutRecord(trajectory, reward_trajectory(trajectory, instance, judge))


def rollout_personalized(
    instance: TrainingInstance,
    policy,
    index: ProfileIndex,
    protocol_config: ProtocolConfig,
    retrieval_config: RetrievalConfig,
    rng: np.random.Generator,
    judge: Judge | None = None,
    trajectory_id: str | None = None,
) -> RolloutRecord:
    return run_rollout(
        instance,
        policy,
        index=index,
        protocol_config=protocol_config,
        retrieval_config=retrieval_config,
        rng=rng,
        judge=judge or SyntheticJudge(),
        personalized=True,
        trajectory_id=trajectory_id or f"{instance.id}/p",
    )


def rollout_baseline(
    instance: TrainingInstance,
    reference_policy,
    protocol_config: ProtocolConfig,
    rng: np.random.Generator,
    judge: Judge | None = None,
    trajectory_id: str | None = None,
) -> RolloutRecord:
    """One rollout from the frozen reference with every search action masked out."""
    return run_rollout(
        instance,
        reference_policy,
        index=None,
        protocol_config=protocol_config,
        retrieval_config=RetrievalConfig(),
        rng=rng,
        judge=judge or SyntheticJudge(),
        personalized=False,
        trajectory_id=trajectory_id or f"{instance.id}/base",
    )


# ------------------------------------------------------------------ training


def _sample_group(
    env: Environment,
    instance: TrainingInstance,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    config: GrpoConfig,
    rng: np.random.Generator,
    step: int,
    pool: ThreadPoolExecutor | None,
) -> tuple[list[RolloutRecord], RolloutRecord | None]:
    # seeds are drawn up front so the stream does not depend on worker scheduling
    seeds = rng.integers(0, 2**63, size=config.group_size + 1)
    index = env.index_for(instance)
    retrieval = RetrievalConfig(config.top_k)

    def personalized(g: int) -> RolloutRecord:
        return rollout_personalized(
            instance,
            env.policy(old, config.temperature),
            index,
            env.protocol,
            retrieval,
            np.random.default_rng(int(seeds[g])),
            env.judge,
            f"{instance.id}/s{step}/g{g}",
        )

    def baseline() -> RolloutRecord:
        return rollout_baseline(
            instance,
            env.policy(reference, config.temperature),
            env.protocol,
            np.random.default_rng(int(seeds[-1])),
            env.judge,
            f"{instance.id}/s{step}/base",
        )

    if pool is None:
        group = [personalized(g) for g in range(config.group_size)]
        base = baseline() if config.sample_baseline else None
    else:
        futures = [pool.submit(personalized, g) for g in range(config.group_size)]
        base_future = pool.submit(baseline) if config.sample_baseline else None
        group = [f.result() for f in futures]
        base = base_future.result() if base_future is not None else None
    return group, base


def train_step(
    batch: Sequence[TrainingInstance],
    live_params: np.ndarray,
    reference_snapshot: PolicySnapshot,
    config: GrpoConfig,
    rng: np.random.Generator,
    *,
    env: Environment,
    step: int = 0,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[np.ndarray, TrainMetrics, list[GroupRollout]]:
    """One GRPO update from ``G`` personalized rollouts (+1 baseline) per instance.

    Groups whose rewards have zero spread contribute no gradient; if every group
    in the batch is degenerate the parameters are returned unchanged.
    """
    old = snapshot(live_params, "old", step)
    lr = lr_at(step, config)
    groups: list[GroupRollout] = []
    grads: list[np.ndarray] = []
    for instance in batch:
        records, base = _sample_group(env, instance, old, reference_snapshot, config, rng, step, pool)
        rewards = [r.reward.normalized for r in records]
        b = base.reward.normalized if base is not None else 0.0
        adv = advantages(rewards, b, group_stats(rewards), use_baseline=config.use_baseline)
        group = GroupRollout(instance.id, tuple(records), base, adv)
        report, grad = grpo_loss(group, live_params, reference_snapshot, config)
        groups.append(replace(group, loss=report))
        if not adv.degenerate:
            grads.append(grad)

    active = [g for g in groups if not g.advantages.degenerate]
    params = np.array(live_params, dtype=np.float64, copy=True)
    if active:
        params = apply_update(params, sum(grads) / len(active), lr)
        # replays past the first epoch see rho != 1 and exercise the clipping
        for _ in range(config.update_epochs - 1):
            grad = sum(grpo_loss(g, params, reference_snapshot, config)[1] for g in active)
            params = apply_update(params, grad / len(active), lr)

    def mean(values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    personal = [r for g in groups for r in g.personalized]
    metrics = TrainMetrics(
        step=step,
        mean_reward=mean([r.reward.normalized for r in personal]),
        baseline_reward=mean([g.baseline_reward for g in groups]),
        mean_retrievals=mean([r.trajectory.retrieval_count for r in personal]),
        mean_response_len=mean([r.trajectory.policy_steps for r in personal]),
        loss=mean([g.loss.total for g in groups]),
        kl=mean([g.loss.kl for g in groups]),
        lr=lr,
        degenerate_groups=len(groups) - len(active),
    )
    return params, metrics, groups


def train(
    dataset: Sequence[TrainingInstance],
    config: GrpoConfig,
    seed: int,
    *,
    env: Environment | None = None,
    init: np.ndarray | None = None,
    workers: int = 1,
    on_step: Callable[[int, list[GroupRollout], TrainMetrics, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, list[TrainMetrics]]:
    """Run ``config.total_steps`` updates; the reference policy is frozen at step 0.

    Instances are visited in a seeded order that is reshuffled every epoch.
    ``on_step`` receives the step's groups, metrics row and post-update params.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    env = env or Environment(dataset)
    params = env.init_params() if init is None else np.array(init, dtype=np.float64, copy=True)
    reference = snapshot(params, "reference", 0)
    order_rng = np.random.default_rng([seed, 0])
    order: list[int] = []
    metrics: list[TrainMetrics] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(config.total_steps):
            batch = []
            for _ in range(config.batch_size):
                if not order:
                    order = list(order_rng.permutation(len(dataset)))
                batch.append(dataset[order.pop(0)])
            step_rng = np.random.default_rng([seed, 1, step])
            try:
                params, row, groups = train_step(
                    batch, params, reference, config, step_rng, env=env, step=step, pool=pool
                )
            except Exception as exc:
                raise RuntimeError(f"training failed at step {step}: {exc}") from exc
            metrics.append(row)
            if on_step is not None:
                on_step(step, groups, row, params)
            if step % 20 == 0 or step == config.total_steps - 1:
                logger.info(
                    "step %d reward %.3f retrievals %.2f loss %.4f", step, row.mean_reward, row.mean_retrievals, row.loss
                )
    finally:
        if pool is not None:
            pool.shutdown()
    return params, metrics


def evaluate(
    dataset: Sequence[TrainingInstance],
    params: np.ndarray | PolicySnapshot,
    config: GrpoConfig,
    seed: int,
    *,
    env: Environment | None = None,
    greedy: bool = False,
) -> dict[str, float]:
    """One personalized rollout per instance, no updates."""
    env = env or Environment(dataset)
    retrieval = RetrievalConfig(config.top_k)
    rewards, retrievals, lengths = [], [], []
    for i, instance in enumerate(dataset):
        record = rollout_personalized(
            instance,
            env.policy(params, config.temperature, greedy=greedy),
            env.index_for(instance),
            env.protocol,
            retrieval,
            np.random.default_rng([seed, 2, i]),
            env.judge,
            f"{instance.id}/eval",
        )
        rewards.append(record.reward.normalized)
        retrievals.append(record.trajectory.retrieval_count)
        lengths.append(record.trajectory.policy_steps)
    return {
        "instances": len(rewards),
        "mean_reward": float(np.mean(rewards)),
        "mean_retrievals": float(np.mean(retrievals)),
        "mean_length": float(np.mean(lengths)),
    }


# ------------------------------------------------------------------ metrics I/O


def write_metrics_csv(metrics: Sequence[TrainMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in metrics:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def read_metrics_csv(path: str | Path) -> list[TrainMetrics]:
    """Parse a metrics CSV; raises ``ValueError`` naming the first bad row."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: row 1: unexpected header {header!r}")
        for row_number, row in enumerate(reader, start=2):
            if len(row) != len(METRICS_COLUMNS):
                raise ValueError(f"{path}: row {row_number}: expected {len(METRICS_COLUMNS)} fields, got {len(row)}")
            try:
                values = dict(zip(METRICS_COLUMNS, row))
                out.append(
                    TrainMetrics(
                        step=int(values["step"]),
                        degenerate_groups=int(values["degenerate_groups"]),
                        **{k: float(values[k]) for k in METRICS_COLUMNS if k not in ("step", "degenerate_groups")},
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}: row {row_number}: {exc}") from None
    return out
