"""Adapter for an external text-generation service.

The service receives ``{"prompt", "stop", "max_tokens", "temperature"}`` and
answers ``{"text", "logprobs"}`` with one natural-log probability per generated
token. Generation stops at ``</search>`` or ``</answer>``; the stop string is
not part of ``text`` (a trailing copy is tolerated). Each returned chunk is
parsed into segments and every generated token becomes one loss-masked
:class:`ActionRecord`, so the GRPO math runs unchanged on token-level steps.
"""

from __future__ import annotations

import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from typing import IO, Any, Protocol

from .dataset import TrainingInstance
from .protocol import (
    INFORMATION_ACTION,
    PROMPT_ACTION,
    ActionRecord,
    Answer,
    ErrorKind,
    Information,
    ParseError,
    Phase,
    ProtocolConfig,
    ProtocolError,
    RolloutState,
    Search,
    Segment,
    Trajectory,
    advance,
    parse,
    render_prompt,
)
from .retrieval import ProfileIndex, RetrievalConfig, format_information, search

__all__ = [
    "GenerationError",
    "Generation",
    "GenerationClient",
    "HttpGenerationClient",
    "StreamGenerationClient",
    "STOP_SEQUENCES",
    "parse_response",
    "external_rollout",
]

STOP_SEQUENCES = ("</search>", "</answer>")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Generation:
    text: str
    logprobs: tuple[float, ...]


class GenerationClient(Protocol):
    def generate(self, request: dict[str, Any]) -> dict[str, Any]: ...


def parse_response(body: Any) -> Generation:
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise GenerationError("response needs a string 'text'")
    raw = body.get("logprobs")
    if not isinstance(raw, list):
        raise GenerationError("response needs a 'logprobs' list")
    values = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v > 0.0:
            raise GenerationError(f"invalid token logprob {v!r}")
        values.append(float(v))
    return Generation(body["text"], tuple(values))


class HttpGenerationClient:
    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url.rstrip("/") + "/generate"
        self.timeout = timeout

    def generate(self, request: dict[str, Any]) -> dict[str, Any]:
        http_request = urllib.request.Request(
            self.url,
            data=json.dumps(request).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                return json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise GenerationError(f"generation service returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise GenerationError(f"generation request failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise GenerationError("generation response is not JSON") from exc


class StreamGenerationClient:
    """One JSON object per line in each direction over a pair of byte streams."""

    def __init__(self, reader: IO[bytes], writer: IO[bytes]):
        self.reader = reader
        self.writer = writer

    def generate(self, request: dict[str, Any]) -> dict[str, Any]:
        self.writer.write(json.dumps(request).encode("utf-8") + b"\n")
        self.writer.flush()
        line = self.reader.readline()
        if not line:
            raise GenerationError("generation stream closed")
        try:
            return json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GenerationError("generation response is not JSON") from exc


def _close_chunk(text: str) -> str:
    """Re-append the stop sequence the service swallowed, if any tag is left open."""
    stripped = text.rstrip()
    for stop in STOP_SEQUENCES:
        if stripped.endswith(stop):
            return stripped
    for stop in STOP_SEQUENCES:
        opening = stop.replace("</", "<")
        if stripped.rfind(opening) > stripped.rfind(stop):
            return stripped + stop
    return stripped


def _token_owners(segments: list[Segment], n_tokens: int) -> list[int]:
    # tokens are attributed to segments in proportion to rendered length
    lengths = [len(s.render()) for s in segments]
    total = sum(lengths)
    bounds, acc = [], 0
    for length in lengths:
        acc += length
        bounds.append(round(n_tokens * acc / total))
    owners, j = [], 0
    for t in range(n_tokens):
        while t >= bounds[j]:
            j += 1
        owners.append(j)
    return owners


def _truncate(state: RolloutState) -> RolloutState:
    return replace(state, phase=Phase.TERMINAL, truncated=True)


def _apply_chunk(
    state: RolloutState,
    chunk: list[Segment],
    generation: Generation,
    index: ProfileIndex,
    retrieval_config: RetrievalConfig,
    segments: list[Segment],
    records: list[ActionRecord],
) -> RolloutState:
    owners = _token_owners(chunk, len(generation.logprobs))
    for j, segment in enumerate(chunk):
        if isinstance(segment, Search) and j != len(chunk) - 1:
            # the model kept writing instead of waiting for retrieved text
            raise ProtocolError(ErrorKind.AWAITING_INFORMATION, len(segments) + 1)
        state = advance(state, segment, cost=owners.count(j))
        if state.truncated:
            return state
        position = len(segments)
        segments.append(segment)
        for t, lp in enumerate(generation.logprobs):
            if owners[t] == j:
                records.append(ActionRecord(len(records), t, lp, True, position))
        if isinstance(segment, Search):
            results = search(index, segment.text, retrieval_config.top_k)
            info = Information(format_information(results))
            state = advance(state, info, injected=True, cost=max(1, len(info.text.split())))
            if state.truncated:
                segments.pop()
                for k in range(len(records)):
                    if records[k].segment_index == position:
                        records[k] = replace(records[k], segment_index=None)
                return state
            records.append(ActionRecord(len(records), INFORMATION_ACTION, None, False, len(segments)))
            segments.append(info)
    return state


def external_rollout(
    instance: TrainingInstance,
    client: GenerationClient,
    index: ProfileIndex,
    protocol_config: ProtocolConfig,
    retrieval_config: RetrievalConfig,
    *,
    max_tokens: int = 512,
    temperature: float = 1.0,
    trajectory_id: str | None = None,
) -> Trajectory:
    """Drive one personalized rollout through an external model.

    Malformed chunks and protocol violations end the rollout truncated, with
    the reason in ``Trajectory.error``; transport failures raise
    :class:`GenerationError`.
    """
    prompt = render_prompt(instance.question)
    state = RolloutState.initial(protocol_config, prompt_steps=1)
    records: list[ActionRecord] = [ActionRecord(0, PROMPT_ACTION, None, False)]
    segments: list[Segment] = []
    error = None

    while not state.terminal:
        context = "\n".join([prompt] + [s.render() for s in segments])
        budget = int(min(max_tokens, state.remaining_steps()))
        if budget < 1:
            state = _truncate(state)
            break
        body = client.generate(
            {"prompt": context, "stop": list(STOP_SEQUENCES), "max_tokens": budget, "temperature": temperature}
        )
        generation = parse_response(body)
        try:
            chunk = parse(_close_chunk(generation.text))
            if not chunk:
                raise ParseError("empty generation", 0)
            state = _apply_chunk(state, chunk, generation, index, retrieval_config, segments, records)
        except (ParseError, ProtocolError) as exc:
            state, error = _truncate(state), str(exc)

    truncated = state.truncated
    answer = segments[-1].text if not truncated and segments and isinstance(segments[-1], Answer) else None
    return Trajectory(
        trajectory_id=trajectory_id or f"{instance.id}/ext",
        instance_id=instance.id,
        segments=tuple(segments),
        actions=tuple(records),
        answer_text=answer,
        retrieval_count=sum(isinstance(s, Search) for s in segments),
        truncated=truncated,
        personalized=True,
        error=error,
    )
