"""Rollout tag grammar and the state machine that interleaves policy output with retrieval.

A response is a sequence of tagged segments::

    <think>...</think>
    <search>...</search>
    <information>...</information>
    <answer>...</answer>

``<information>`` is always injected by the environment after a ``<search>``; the
policy never writes it.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import ClassVar, Sequence

import numpy as np

__all__ = [
    "Segment",
    "Think",
    "Search",
    "Information",
    "Answer",
    "SEGMENT_TYPES",
    "ProtocolConfig",
    "Phase",
    "RolloutState",
    "ErrorKind",
    "ProtocolError",
    "ParseError",
    "ActionRecord",
    "Trajectory",
    "PROMPT_TEMPLATE",
    "render_prompt",
    "advance",
    "parse",
    "render_segments",
    "validate_sequence",
    "check_trajectory",
]


@dataclass(frozen=True)
class Segment:
    text: str
    tag: ClassVar[str] = ""

    def render(self) -> str:
        return f"<{self.tag}>{self.text}</{self.tag}>"


@dataclass(frozen=True)
class Think(Segment):
    tag: ClassVar[str] = "think"


@dataclass(frozen=True)
class Search(Segment):
    tag: ClassVar[str] = "search"


@dataclass(frozen=True)
class Information(Segment):
    tag: ClassVar[str] = "information"


@dataclass(frozen=True)
class Answer(Segment):
    tag: ClassVar[str] = "answer"


SEGMENT_TYPES: dict[str, type[Segment]] = {cls.tag: cls for cls in (Think, Search, Information, Answer)}


@dataclass(frozen=True)
class ProtocolConfig:
    max_steps: int = 2048
    max_search_turns: int = 4

    def __post_init__(self) -> None:
        if self.max_steps < 16:
            raise ValueError("max_steps must be at least 16")
        if self.max_search_turns < 1:
            raise ValueError("max_search_turns must be positive")


# ---------------------------------------------------------------- state machine


class Phase(enum.Enum):
    AWAITING_POLICY = "awaiting_policy"
    AWAITING_INFORMATION = "awaiting_information"
    TERMINAL = "terminal"


class ErrorKind(enum.Enum):
    SEARCH_BUDGET_EXHAUSTED = "search budget exhausted"
    EMPTY_SEARCH_QUERY = "empty search query"
    UNEXPECTED_INFORMATION = "information without a pending search"
    POLICY_INFORMATION = "information segment emitted by the policy"
    AWAITING_INFORMATION = "policy segment while information is pending"
    AFTER_TERMINAL = "event after terminal state"


class ProtocolError(Exception):
    def __init__(self, kind: ErrorKind, index: int | None = None):
        where = "" if index is None else f" at segment {index}"
        super().__init__(f"{kind.value}{where}")
        self.kind = kind
        self.index = index


@dataclass(frozen=True)
class RolloutState:
    """Immutable snapshot of one rollout's position in the transition table.

    ``steps`` counts every consumed step, including the prompt, against
    ``max_steps``; ``search_turns`` counts accepted ``<search>`` segments.
    """

    phase: Phase = Phase.AWAITING_POLICY
    search_turns: int = 0
    steps: int = 0
    truncated: bool = False
    max_steps: int | None = 2048
    max_search_turns: int | None = 4

    @classmethod
    def initial(cls, config: ProtocolConfig | None = None, prompt_steps: int = 0) -> "RolloutState":
        if config is None:
            return cls(steps=prompt_steps, max_steps=None, max_search_turns=None)
        return cls(
            steps=prompt_steps,
            max_steps=config.max_steps,
            max_search_turns=config.max_search_turns,
        )

    @property
    def terminal(self) -> bool:
        return self.phase is Phase.TERMINAL

    def remaining_steps(self) -> float:
        return float("inf") if self.max_steps is None else self.max_steps - self.steps


def advance(state: RolloutState, event: Segment, *, injected: bool = False, cost: int = 1) -> RolloutState:
    """Apply one segment to ``state``.

    ``injected`` marks environment-produced content. ``cost`` is the number of
    steps the segment consumes; if it does not fit in the remaining budget the
    rollout ends truncated and the segment is not applied. Illegal events raise
    :class:`ProtocolError`.
    """
    if state.terminal:
        raise ProtocolError(ErrorKind.AFTER_TERMINAL)

    if isinstance(event, Information):
        if not injected:
            raise ProtocolError(ErrorKind.POLICY_INFORMATION)
        if state.phase is not Phase.AWAITING_INFORMATION:
            raise ProtocolError(ErrorKind.UNEXPECTED_INFORMATION)
    else:
        if state.phase is Phase.AWAITING_INFORMATION:
            raise ProtocolError(ErrorKind.AWAITING_INFORMATION)
        if isinstance(event, Search):
            if not event.text.strip():
                raise ProtocolError(ErrorKind.EMPTY_SEARCH_QUERY)
            if state.max_search_turns is not None and state.search_turns >= state.max_search_turns:
                raise ProtocolError(ErrorKind.SEARCH_BUDGET_EXHAUSTED)
        elif not isinstance(event, (Think, Answer)):
            raise TypeError(f"not a segment: {event!r}")

    if cost > state.remaining_steps():
        return replace(state, phase=Phase.TERMINAL, truncated=True)

    steps = state.steps + cost
    if isinstance(event, Search):
        return replace(state, phase=Phase.AWAITING_INFORMATION, search_turns=state.search_turns + 1, steps=steps)
    if isinstance(event, Answer):
        return replace(state, phase=Phase.TERMINAL, steps=steps)
    return replace(state, phase=Phase.AWAITING_POLICY, steps=steps)


# ------------------------------------------------------------------- prompt

PROMPT_TEMPLATE = (
    "Your task is to generate a personalized response to the user's question. To do this, "
    "you can perform a series of actions, including thinking in <think> and </think> tags, "
    "searching for information from the user past interactions with the system (i.e., "
    "previous asked questions and the detailed information need) by generating a non-empty "
    "search query in <search> and </search> tags, and finally providing the answer in "
    "<answer> and </answer> tags. The retrieved information from user history will be "
    "provided to you inside <information> and </information> tags. You need to first think "
    "about the question and how to generate a personalized answer for the user. In this "
    "thinking process, you should try to understand the user's preferences and needs based "
    "on its past interactions with the system. The thinking process should be inside <think> "
    "and </think> tags. If you need to search for information about the user from its "
    "history, you can do this by generating a non-empty search query inside <search> and "
    "</search> tags. You can use this information in thinking process and answer generation. "
    "Nothing should be outside the mentioned tags except the initial question. Now, answer "
    "the following question: {question}"
)


def render_prompt(question: str) -> str:
    if not question:
        raise ValueError("question must be non-empty")
    # str.replace, not str.format: question text may contain braces.
    return PROMPT_TEMPLATE.replace("{question}", question)


# --------------------------------------------------------------- text codec


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


_OPEN_RE = re.compile(r"<(think|search|information|answer)>")
_ANY_TAG_RE = re.compile(r"</?[A-Za-z_][^<>\s]*>")


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def parse(text: str) -> list[Segment]:
    """Split a response into segments. Whitespace between segments is ignored."""
    segments: list[Segment] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        if text[i] != "<":
            raise ParseError("text outside tags", _byte_offset(text, i))
        m = _OPEN_RE.match(text, i)
        if m is None:
            t = _ANY_TAG_RE.match(text, i)
            if t is not None:
                raise ParseError(f"unknown tag {t.group(0)!r}", _byte_offset(text, i))
            raise ParseError("text outside tags", _byte_offset(text, i))
        tag = m.group(1)
        close = f"</{tag}>"
        end = text.find(close, m.end())
        if end < 0:
            raise ParseError(f"unclosed tag <{tag}>", _byte_offset(text, i))
        segments.append(SEGMENT_TYPES[tag](text[m.end():end]))
        i = end + len(close)
    return segments


def validate_sequence(segments: Sequence[Segment], config: ProtocolConfig | None = None) -> RolloutState:
    """Walk the transition table; Information segments count as injected."""
    state = RolloutState.initial(config)
    for index, segment in enumerate(segments):
        try:
            state = advance(state, segment, injected=isinstance(segment, Information))
        except ProtocolError as exc:
            raise ProtocolError(exc.kind, index) from None
    return state


def render_segments(segments: Sequence[Segment], config: ProtocolConfig | None = None) -> str:
    """Canonical serialization, newline-separated. Inverse of :func:`parse`."""
    validate_sequence(segments, config)
    for index, segment in enumerate(segments):
        if f"</{segment.tag}>" in segment.text:
            raise ValueError(f"segment {index} contains its own closing tag")
    return "\n".join(segment.render() for segment in segments)


# ----------------------------------------------------------------- records

PROMPT_ACTION = -1
INFORMATION_ACTION = -2


@dataclass(frozen=True)
class ActionRecord:
    """One step of a trajectory.

    Policy steps carry ``logprob_old`` and ``loss_mask=True``. Prompt and injected
    information steps have ``action_id`` set to a negative marker, no logprob and
    ``loss_mask=False``. ``segment_index`` points into the trajectory's segments
    (None for the prompt and for a rejected final action). ``features`` and ``allowed`` hold the policy input at the
    step so the loss can be re-evaluated under new parameters.
    """

    step_index: int
    action_id: int
    logprob_old: float | None
    loss_mask: bool
    segment_index: int | None = None
    features: np.ndarray | None = field(default=None, compare=False, repr=False)
    allowed: tuple[bool, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.loss_mask != (self.logprob_old is not None):
            raise ValueError("logprob_old must be present exactly on loss-masked steps")
        if self.logprob_old is not None and self.logprob_old > 0.0:
            raise ValueError("logprob_old must be <= 0")


@dataclass(frozen=True)
class Trajectory:
    trajectory_id: str
    instance_id: str
    segments: tuple[Segment, ...]
    actions: tuple[ActionRecord, ...]
    answer_text: str | None
    retrieval_count: int
    truncated: bool
    personalized: bool
    error: str | None = None

    @property
    def policy_steps(self) -> int:
        return sum(1 for a in self.actions if a.loss_mask)


def check_trajectory(traj: Trajectory, config: ProtocolConfig) -> None:
    """Assert the structural invariants of a finished trajectory."""
    searches = sum(isinstance(s, Search) for s in traj.segments)
    infos = sum(isinstance(s, Information) for s in traj.segments)
    assert searches == infos == traj.retrieval_count, (searches, infos, traj.retrieval_count)
    assert traj.retrieval_count <= config.max_search_turns
    assert len(traj.actions) <= config.max_steps
    answers = [i for i, s in enumerate(traj.segments) if isinstance(s, Answer)]
    if not traj.truncated:
        assert answers == [len(traj.segments) - 1]
        assert traj.answer_text == traj.segments[-1].text
    else:
        assert traj.answer_text is None
    for record in traj.actions:
        assert (record.action_id >= 0) == record.loss_mask
        if record.segment_index is not None:
            injected = isinstance(traj.segments[record.segment_index], Information)
            assert record.loss_mask != injected
