import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from rar_forge.dataset import SyntheticWorldConfig, generate_synthetic
from rar_forge.generation import (
    GenerationError,
    HttpGenerationClient,
    StreamGenerationClient,
    external_rollout,
    parse_response,
)
from rar_forge.protocol import Answer, Information, ProtocolConfig, Search, Think, check_trajectory
from rar_forge.retrieval import HashedBowEmbedder, RetrievalConfig, build_index
from rar_forge.reward import SyntheticJudge, reward_trajectory


@pytest.fixture(scope="module")
def instance():
    return generate_synthetic(SyntheticWorldConfig(num_users=1, aspects_per_question=1, seed=2))[0]


@pytest.fixture(scope="module")
def index(instance):
    return build_index(instance.profile, HashedBowEmbedder())


class ScriptedClient:
    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        return self.replies.pop(0)


def reply(text, n):
    return {"text": text, "logprobs": [-0.25] * n}


def test_search_then_answer(instance, index):
    attribute = instance.aspects[0].id
    client = ScriptedClient(
        [
            reply(f"<think>which part matters</think>\n<search>{attribute}", 6),
            reply("<answer>The retrieved notes say: " + " ".join(instance.aspects[0].keyphrases) + "</answer>", 4),
        ]
    )
    traj = external_rollout(instance, client, index, ProtocolConfig(), RetrievalConfig(3))
    assert [type(s) for s in traj.segments] == [Think, Search, Information, Answer]
    assert traj.retrieval_count == 1 and not traj.truncated and traj.error is None
    check_trajectory(traj, ProtocolConfig())
    masks = [a.loss_mask for a in traj.actions]
    assert masks.count(True) == 10 and masks.count(False) == 2
    info_index = next(i for i, a in enumerate(traj.actions) if not a.loss_mask and a.segment_index == 2)
    assert traj.actions[info_index].logprob_old is None
    assert reward_trajectory(traj, instance, SyntheticJudge()).normalized == 1.0

    first, second = client.requests
    assert first["stop"] == ["</search>", "</answer>"] and first["temperature"] == 1.0
    assert first["prompt"].endswith(instance.question)
    assert second["prompt"].endswith("</information>") and "<search>" in second["prompt"]


def test_malformed_generation_truncates(instance, index):
    client = ScriptedClient([reply("stray words <think>x</think>", 3)])
    traj = external_rollout(instance, client, index, ProtocolConfig(), RetrievalConfig(3))
    assert traj.truncated and "text outside tags" in traj.error and traj.answer_text is None


def test_writing_past_a_search_is_a_protocol_error(instance, index):
    client = ScriptedClient([reply("<search>diet</search><answer>x</answer>", 3)])
    traj = external_rollout(instance, client, index, ProtocolConfig(), RetrievalConfig(3))
    assert traj.truncated and "information is pending" in traj.error


def test_step_budget(instance, index):
    client = ScriptedClient([reply("<think>" + "x " * 40 + "</think>", 40)])
    traj = external_rollout(instance, client, index, ProtocolConfig(max_steps=16), RetrievalConfig(3))
    assert traj.truncated and len(traj.actions) <= 16
    assert client.requests[0]["max_tokens"] == 15


@pytest.mark.parametrize(
    "body",
    [
        {"text": 3, "logprobs": []},
        {"text": "x"},
        {"text": "x", "logprobs": [0.5]},
        {"text": "x", "logprobs": [float("nan")]},
        {"text": "x", "logprobs": [True]},
        [],
    ],
)
def test_response_validation(body):
    with pytest.raises(GenerationError):
        parse_response(body)


def test_stream_transport(instance, index):
    responses = [
        reply("<answer>plain</answer>", 2),
    ]
    reader = io.BytesIO("".join(json.dumps(r) + "\n" for r in responses).encode())
    writer = io.BytesIO()
    traj = external_rollout(instance, StreamGenerationClient(reader, writer), index, ProtocolConfig(), RetrievalConfig(3))
    assert traj.answer_text == "plain"
    sent = json.loads(writer.getvalue().decode().splitlines()[0])
    assert set(sent) == {"prompt", "stop", "max_tokens", "temperature"}
    with pytest.raises(GenerationError, match="closed"):
        StreamGenerationClient(io.BytesIO(b""), io.BytesIO()).generate({})


class _Server(BaseHTTPRequestHandler):
    status = 200

    def do_POST(self):
        json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.send_response(self.status)
        self.end_headers()
        if self.status == 200:
            self.wfile.write(json.dumps(reply("<answer>ok</answer>", 1)).encode())

    def log_message(self, *args):
        pass


def test_http_transport(instance, index):
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Server)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        client = HttpGenerationClient(f"http://127.0.0.1:{server.server_port}")
        _Server.status = 200
        traj = external_rollout(instance, client, index, ProtocolConfig(), RetrievalConfig(3))
        assert traj.answer_text == "ok"
        _Server.status = 503
        with pytest.raises(GenerationError, match="503"):
            external_rollout(instance, client, index, ProtocolConfig(), RetrievalConfig(3))
    finally:
        server.shutdown()
        server.server_close()
