"""Linear-softmax policy over macro-actions, with analytic log-prob gradients.

The policy scores every action with ``theta @ phi(s)`` and samples from
``softmax(logits / temperature)``, optionally restricted to an allowed subset.
Actions are whole segments (think / search for a term / answer from a
template), so a rollout is a handful of steps and every gradient can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._text import tokenize
from .dataset import UserDocument
from .protocol import Answer, Search, Segment, Think

__all__ = [
    "logits",
    "log_softmax",
    "probabilities",
    "sample_action",
    "logprob",
    "grad_logprob",
    "PolicySnapshot",
    "snapshot",
    "Action",
    "ActionVocabulary",
    "RolloutContext",
    "FeatureMap",
    "Decision",
    "SoftmaxPolicy",
    "ScriptedPolicy",
    "init_params",
    "oracle_params",
]


# ------------------------------------------------------------------ math


def logits(params: np.ndarray, state: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    if params.ndim != 2 or state.ndim != 1 or params.shape[1] != state.shape[0]:
        raise ValueError(f"dimension mismatch: params {params.shape} vs state {state.shape}")
    return params @ state


def _as_mask(allowed: Sequence[bool] | np.ndarray | None, n: int) -> np.ndarray | None:
    if allowed is None:
        return None
    mask = np.asarray(allowed, dtype=bool)
    if mask.shape != (n,) or not mask.any():
        raise ValueError("allowed mask must select at least one action")
    return mask


def log_softmax(
    raw_logits: np.ndarray, temperature: float = 1.0, allowed: Sequence[bool] | np.ndarray | None = None
) -> np.ndarray:
    """Log-probabilities at ``temperature``; disallowed actions get ``-inf``."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    z = np.asarray(raw_logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    z = z / temperature
    mask = _as_mask(allowed, z.shape[0])
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max()
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum())


def probabilities(params, state, temperature: float = 1.0, allowed=None) -> np.ndarray:
    return np.exp(log_softmax(logits(params, state), temperature, allowed))


def sample_action(
    params: np.ndarray,
    state: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
    allowed=None,
) -> tuple[int, float]:
    """Draw one action; returns ``(action, natural-log probability)``."""
    lp = log_softmax(logits(params, state), temperature, allowed)
    cdf = np.cumsum(np.exp(lp))
    u = rng.random() * cdf[-1]
    action = int(np.searchsorted(cdf, u, side="right"))
    action = min(action, len(cdf) - 1)
    while not np.isfinite(lp[action]):  # u landed on a zero-width bucket edge
        action -= 1
    return action, float(lp[action])


def logprob(params, state, action: int, temperature: float = 1.0, allowed=None) -> float:
    return float(log_softmax(logits(params, state), temperature, allowed)[action])


def grad_logprob(params, state, action: int, temperature: float = 1.0, allowed=None) -> np.ndarray:
    """d log p(action | state) / d params, same shape as ``params``.

    Row ``b`` equals ``(1[b == action] - p(b)) * state / temperature``.
    """
    state = np.asarray(state, dtype=np.float64)
    p = np.exp(log_softmax(logits(params, state), temperature, allowed))
    coeff = -p
    coeff[action] += 1.0
    return np.outer(coeff, state) / temperature


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    params: np.ndarray
    role: str
    step: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicySnapshot):
            return NotImplemented
        return self.role == other.role and self.step == other.step and np.array_equal(self.params, other.params)

    __hash__ = None  # type: ignore[assignment]


def snapshot(params: np.ndarray | PolicySnapshot, role: str, step: int = 0) -> PolicySnapshot:
    """Frozen deep copy; ``role`` is ``"reference"`` or ``"old"``."""
    if role not in ("reference", "old"):
        raise ValueError(f"unknown snapshot role {role!r}")
    source = params.params if isinstance(params, PolicySnapshot) else params
    frozen = np.array(source, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(frozen)):
        raise FloatingPointError("cannot snapshot non-finite parameters")
    frozen.setflags(write=False)
    return PolicySnapshot(params=frozen, role=role, step=step)


# ------------------------------------------------------------ environment side


@dataclass(frozen=True)
class Action:
    kind: str  # "think" | "search" | "answer"
    arg: str


THINK_TEMPLATES = {
    "plan": "I should work out which parts of the user's background this question depends on.",
    "reflect": "Let me reconsider what I have learned about the user so far.",
}
ANSWER_TEMPLATES = ("direct", "latest", "all")
_ANSWER_OPENING = "Here is advice for your situation."
_ANSWER_EVIDENCE = "Taking into account what you shared before:"


@dataclass
class RolloutContext:
    """Everything the policy may condition on: the question plus what retrieval returned."""

    question: str
    question_tokens: frozenset[str] = frozenset()
    searches: list[str] = field(default_factory=list)
    turns: list[list[UserDocument]] = field(default_factory=list)
    observed_tokens: set[str] = field(default_factory=set)
    last_kind: str | None = None

    def __post_init__(self) -> None:
        if not self.question_tokens:
            self.question_tokens = frozenset(tokenize(self.question))

    def observe(self, documents: Sequence[UserDocument]) -> None:
        self.turns.append(list(documents))
        for doc in documents:
            self.observed_tokens.update(tokenize(doc.text))
        self.last_kind = "information"


class ActionVocabulary:
    """Stable ordering: think templates, one search per query term, answer templates."""

    def __init__(self, query_terms: Sequence[str], think_templates: Sequence[str] = tuple(THINK_TEMPLATES)):
        terms = list(query_terms)
        if not terms:
            raise ValueError("query vocabulary must be non-empty")
        if len(set(terms)) != len(terms) or any(not t.strip() for t in terms):
            raise ValueError("query terms must be unique and non-empty")
        self.query_terms = tuple(terms)
        self.actions: tuple[Action, ...] = (
            *(Action("think", t) for t in think_templates),
            *(Action("search", q) for q in terms),
            *(Action("answer", a) for a in ANSWER_TEMPLATES),
        )

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Action:
        return self.actions[i]

    def index(self, kind: str, arg: str) -> int:
        return self.actions.index(Action(kind, arg))

    def allowed(self, *, allow_search: bool = True) -> tuple[bool, ...]:
        return tuple(allow_search or a.kind != "search" for a in self.actions)

    def render(self, action_id: int, ctx: RolloutContext) -> Segment:
        action = self.actions[action_id]
        if action.kind == "think":
            return Think(THINK_TEMPLATES[action.arg])
        if action.kind == "search":
            return Search(action.arg)
        if action.arg == "direct" or not ctx.turns:
            slots: list[UserDocument] = []
        elif action.arg == "latest":
            slots = ctx.turns[-1]
        else:
            slots = [doc for turn in ctx.turns for doc in turn]
        seen: set[str] = set()
        texts = []
        for doc in slots:
            if doc.id not in seen:
                seen.add(doc.id)
                texts.append(doc.text)
        if not texts:
            return Answer(_ANSWER_OPENING)
        return Answer(" ".join([_ANSWER_OPENING, _ANSWER_EVIDENCE, *texts]))


class FeatureMap:
    """phi(s) for a rollout prefix.

    Layout: bias | question mentions term (Q) | term already searched (Q) |
    term seen in retrieved text (Q) | mentioned but not yet searched (Q) | count
    of such pending terms | one-hot number of searches (max_search_turns + 1) |
    one-hot last segment (start, think, information).
    """

    LAST_KINDS = (None, "think", "information")

    def __init__(self, query_terms: Sequence[str], max_search_turns: int = 4):
        self.query_terms = tuple(query_terms)
        self.max_search_turns = max_search_turns
        q = len(self.query_terms)
        self.pending_offset = 1 + 3 * q
        self.pending_count = 1 + 4 * q
        self.dimension = 2 + 4 * q + (max_search_turns + 1) + len(self.LAST_KINDS)

    def __call__(self, ctx: RolloutContext) -> np.ndarray:
        q = len(self.query_terms)
        phi = np.zeros(self.dimension, dtype=np.float64)
        phi[0] = 1.0
        mentioned = np.array([t in ctx.question_tokens for t in self.query_terms], dtype=np.float64)
        searched = np.array([t in ctx.searches for t in self.query_terms], dtype=np.float64)
        seen = np.array([t in ctx.observed_tokens for t in self.query_terms], dtype=np.float64)
        pending = mentioned * (1.0 - searched)
        phi[1 : 1 + q] = mentioned
        phi[1 + q : 1 + 2 * q] = searched
        phi[1 + 2 * q : 1 + 3 * q] = seen
        phi[self.pending_offset : self.pending_offset + q] = pending
        phi[self.pending_count] = pending.sum()
        offset = self.pending_count + 1
        phi[offset + min(len(ctx.searches), self.max_search_turns)] = 1.0
        offset += self.max_search_turns + 1
        phi[offset + self.LAST_KINDS.index(ctx.last_kind)] = 1.0
        return phi


@dataclass(frozen=True)
class Decision:
    action_id: int
    logprob: float
    features: np.ndarray | None = None


class SoftmaxPolicy:
    """Binds parameters (live array or snapshot) to a vocabulary and feature map."""

    def __init__(
        self,
        vocab: ActionVocabulary,
        features: FeatureMap,
        params: np.ndarray | PolicySnapshot,
        temperature: float = 1.0,
        greedy: bool = False,
    ):
        self.vocab = vocab
        self.features = features
        self.params = params.params if isinstance(params, PolicySnapshot) else np.asarray(params)
        if self.params.shape != (len(vocab), features.dimension):
            raise ValueError(f"params shape {self.params.shape} != {(len(vocab), features.dimension)}")
        self.temperature = temperature
        self.greedy = greedy

    def act(self, ctx: RolloutContext, rng: np.random.Generator, allowed: Sequence[bool]) -> Decision:
        phi = self.features(ctx)
        if self.greedy:
            lp = log_softmax(logits(self.params, phi), self.temperature, allowed)
            action = int(np.argmax(lp))
            return Decision(action, float(lp[action]), phi)
        action, lp = sample_action(self.params, phi, self.temperature, rng, allowed)
        return Decision(action, lp, phi)


class ScriptedPolicy:
    """Replays a fixed list of action ids (log-probability 0); for tests and demos."""

    def __init__(self, vocab: ActionVocabulary, script: Sequence[int], features: FeatureMap | None = None):
        self.vocab = vocab
        self.script = list(script)
        self.features = features
        self._cursor = 0

    def act(self, ctx: RolloutContext, rng: np.random.Generator, allowed: Sequence[bool]) -> Decision:
        if self._cursor >= len(self.script):
            raise RuntimeError("script exhausted")
        action = self.script[self._cursor]
        self._cursor += 1
        phi = self.features(ctx) if self.features is not None else None
        return Decision(action, 0.0, phi)


DEFAULT_PRIOR = {"think": 0.2, "search": 0.4, "answer": {"direct": 0.25, "latest": 0.05, "all": 0.1}}


def init_params(vocab: ActionVocabulary, features: FeatureMap, prior: dict | None = None) -> np.ndarray:
    """Zero weights except a bias column holding log prior probabilities.

    The default prior stands in for a pretrained model's habits: it mostly
    answers straight away and searches about once per rollout.
    """
    prior = DEFAULT_PRIOR if prior is None else prior
    kinds = [a.kind for a in vocab.actions]
    theta = np.zeros((len(vocab), features.dimension), dtype=np.float64)
    for i, action in enumerate(vocab.actions):
        mass = prior[action.kind]
        if isinstance(mass, dict):
            p = mass[action.arg]
        else:
            p = mass / kinds.count(action.kind)
        theta[i, 0] = np.log(p)
    return theta


def oracle_params(vocab: ActionVocabulary, features: FeatureMap, scale: float = 20.0) -> np.ndarray:
    """Hand-built weights that, acted on greedily, search every pending term then answer with all evidence."""
    theta = np.zeros((len(vocab), features.dimension), dtype=np.float64)
    for j, term in enumerate(vocab.query_terms):
        theta[vocab.index("search", term), features.pending_offset + j] = scale
    answer_all = vocab.index("answer", "all")
    theta[answer_all, 0] = scale / 2
    theta[answer_all, features.pending_count] = -scale
    return theta
