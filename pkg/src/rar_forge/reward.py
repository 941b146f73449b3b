"""Rubric scoring: per-aspect 0-2 judgments averaged onto [0, 1]."""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence

from ._text import tokenize
from .dataset import RubricAspect, TrainingInstance
from .protocol import Trajectory

__all__ = [
    "AspectScore",
    "RewardRecord",
    "Judge",
    "JudgeError",
    "SyntheticJudge",
    "HttpJudge",
    "score_synthetic",
    "normalize",
    "reward_trajectory",
]


@dataclass(frozen=True)
class AspectScore:
    aspect_id: str
    raw: int

    def __post_init__(self) -> None:
        if not isinstance(self.raw, int) or isinstance(self.raw, bool) or self.raw not in (0, 1, 2):
            raise ValueError(f"raw score must be 0, 1 or 2, got {self.raw!r}")


@dataclass(frozen=True)
class RewardRecord:
    trajectory_id: str
    aspect_scores: tuple[AspectScore, ...]
    normalized: float


class JudgeError(RuntimeError):
    pass


class Judge(Protocol):
    def score(
        self, question: str, answer_text: str, aspects: Sequence[RubricAspect], narrative: str
    ) -> list[AspectScore]: ...


def _contains_phrase(tokens: list[str], phrase: list[str]) -> bool:
    if not phrase:
        return False
    n = len(phrase)
    return any(tokens[i : i + n] == phrase for i in range(len(tokens) - n + 1))


def score_synthetic(
    question: str, answer_text: str, aspects: Sequence[RubricAspect], narrative: str = ""
) -> list[AspectScore]:
    """2 if every keyphrase of the aspect occurs in the answer, 1 if some do, else 0.

    Matching is case-insensitive on whole tokens; multi-word keyphrases must
    occur as a contiguous run. ``question`` and ``narrative`` are ignored.
    """
    if not aspects:
        raise ValueError("aspects must be non-empty")
    tokens = tokenize(answer_text)
    scores = []
    for aspect in aspects:
        if not aspect.keyphrases:
            raise ValueError(f"aspect {aspect.id!r} has no keyphrases; the synthetic judge needs them")
        hits = sum(_contains_phrase(tokens, tokenize(k)) for k in aspect.keyphrases)
        raw = 2 if hits == len(aspect.keyphrases) else (1 if hits else 0)
        scores.append(AspectScore(aspect.id, raw))
    return scores


class SyntheticJudge:
    def score(self, question, answer_text, aspects, narrative):
        return score_synthetic(question, answer_text, aspects, narrative)


def normalize(scores: Sequence[AspectScore]) -> float:
    if not scores:
        raise ValueError("cannot normalize an empty score list")
    return sum(s.raw / 2.0 for s in scores) / len(scores)


def reward_trajectory(trajectory: Trajectory, instance: TrainingInstance, judge: Judge) -> RewardRecord:
    """Outcome reward for the final answer; no answer means zero on every aspect."""
    if trajectory.answer_text is None:
        zeros = tuple(AspectScore(a.id, 0) for a in instance.aspects)
        return RewardRecord(trajectory.trajectory_id, zeros, 0.0)
    try:
        scores = judge.score(instance.question, trajectory.answer_text, instance.aspects, instance.narrative)
    except Exception as exc:
        raise JudgeError(f"judge failed on trajectory {trajectory.trajectory_id}: {exc}") from exc
    if [s.aspect_id for s in scores] != [a.id for a in instance.aspects]:
        raise JudgeError(f"judge returned misaligned aspects for trajectory {trajectory.trajectory_id}")
    return RewardRecord(trajectory.trajectory_id, tuple(scores), normalize(scores))


class HttpJudge:
    """Client for an external judge at ``POST {url}/judge``.

    Timeouts, transport failures, non-2xx replies and malformed bodies raise
    :class:`JudgeError`; they are never turned into a zero score. Calls are
    serialized because an external judge is not assumed to be reentrant.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/") + "/judge"
        self.timeout = timeout
        self._lock = threading.Lock()

    def score(self, question, answer_text, aspects, narrative):
        payload = {
            "question": question,
            "answer": answer_text,
            "narrative": narrative,
            "aspects": [{"id": a.id, "text": a.text} for a in aspects],
        }
        request = urllib.request.Request(
            self.url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with self._lock, urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise JudgeError(f"judge returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise JudgeError(f"judge request failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise JudgeError("judge response is not JSON") from exc

        try:
            entries = body["scores"]
            by_id = {str(e["id"]): e["raw"] for e in entries}
            return [AspectScore(a.id, by_id[a.id]) for a in aspects]
        except (KeyError, TypeError, ValueError) as exc:
            raise JudgeError(f"malformed judge response: {exc}") from exc
