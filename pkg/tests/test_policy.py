import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rar_forge.dataset import UserDocument
from rar_forge.optimizer import GrpoConfig
from rar_forge.policy import (
    ActionVocabulary,
    FeatureMap,
    RolloutContext,
    grad_logprob,
    init_params,
    logits,
    logprob,
    oracle_params,
    probabilities,
    sample_action,
    snapshot,
)
from rar_forge.protocol import Answer, Search, Think
from rar_forge.trainer import evaluate


def random_case(rng, max_actions=6, max_dim=6):
    n, d = int(rng.integers(2, max_actions + 1)), int(rng.integers(1, max_dim + 1))
    return rng.normal(size=(n, d)), rng.normal(size=d), n


def test_logits_examples():
    rng = np.random.default_rng(0)
    theta, phi, _ = random_case(rng)
    assert not logits(np.zeros_like(theta), phi).any()
    assert not logits(theta, np.zeros_like(phi)).any()
    for _ in range(50):
        theta, phi, _ = random_case(rng)
        assert np.allclose(logits(theta, phi), oracles.logits(theta.tolist(), phi.tolist()), atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        logits(theta, np.zeros(theta.shape[1] + 1))


def test_closed_form_logprob():
    theta = np.array([[1.0], [0.0]])
    assert logprob(theta, np.array([1.0]), 0) == pytest.approx(-math.log1p(math.exp(-1)), abs=1e-12)
    assert logprob(theta, np.array([1.0]), 0) == pytest.approx(-0.3133, abs=1e-4)
    assert logprob(np.zeros((7, 2)), np.ones(2), 3) == pytest.approx(-math.log(7), abs=1e-12)


def test_sampling_frequencies():
    rng = np.random.default_rng(1)
    theta = np.zeros((2, 1))
    draws = [sample_action(theta, np.ones(1), 1.0, rng)[0] for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.02
    sharp = np.array([[10.0], [0.0]])
    draws = [sample_action(sharp, np.ones(1), 0.05, rng)[0] for _ in range(1000)]
    assert draws.count(0) == 1000


def test_sampled_logprob_matches_logprob():
    rng = np.random.default_rng(2)
    for _ in range(200):
        theta, phi, n = random_case(rng)
        t = float(rng.uniform(0.3, 3.0))
        a, lp = sample_action(theta, phi, t, rng)
        assert lp == pytest.approx(logprob(theta, phi, a, t), abs=1e-15) and lp <= 0.0


def test_sampling_is_seeded():
    theta, phi, _ = random_case(np.random.default_rng(3))
    a = [sample_action(theta, phi, 1.0, np.random.default_rng(9))[0] for _ in range(5)]
    assert len(set(a)) == 1


def test_allowed_mask():
    theta = np.zeros((4, 1))
    allowed = (True, False, True, False)
    p = probabilities(theta, np.ones(1), 1.0, allowed)
    assert p.tolist() == [0.5, 0.0, 0.5, 0.0]
    rng = np.random.default_rng(4)
    assert {sample_action(theta, np.ones(1), 1.0, rng, allowed)[0] for _ in range(500)} == {0, 2}
    g = grad_logprob(theta, np.ones(1), 0, 1.0, allowed)
    assert g[:, 0].tolist() == [0.5, 0.0, -0.5, 0.0]
    with pytest.raises(ValueError):
        probabilities(theta, np.ones(1), 1.0, (False,) * 4)


def test_non_finite_logits_rejected():
    with pytest.raises(FloatingPointError):
        logprob(np.array([[np.inf], [0.0]]), np.ones(1), 0)
    with pytest.raises(ValueError):
        logprob(np.zeros((2, 1)), np.ones(1), 0, temperature=0.0)


def test_gradient_example():
    g = grad_logprob(np.zeros((2, 1)), np.array([1.0]), 0)
    assert g.tolist() == [[0.5], [-0.5]]


def test_gradient_matches_oracle_and_differences():
    rng = np.random.default_rng(5)
    for _ in range(100):
        theta, phi, n = random_case(rng)
        a, t = int(rng.integers(n)), float(rng.uniform(0.5, 2.0))
        g = grad_logprob(theta, phi, a, t)
        assert np.allclose(g, oracles.grad_logprob(theta.tolist(), phi.tolist(), a, t), atol=1e-12, rtol=0)
        fd = oracles.central_difference(
            lambda x: logprob(np.reshape(x, theta.shape), phi, a, t), theta.ravel().tolist()
        )
        fd = np.reshape(fd, theta.shape)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), temperature=st.floats(0.1, 10.0))
def test_distribution_properties(seed, temperature):
    theta, phi, n = random_case(np.random.default_rng(seed))
    p = probabilities(theta, phi, temperature)
    assert abs(p.sum() - 1.0) <= 1e-12
    # score-function identity, summed exactly over the finite action set
    expected = sum(p[a] * grad_logprob(theta, phi, a, temperature) for a in range(n))
    assert np.abs(expected).max() <= 1e-12
    assert np.argmax(p) == np.argmax(probabilities(theta, phi, 1.0))
    assert all(logprob(theta, phi, a, temperature) <= 0.0 for a in range(n))


def test_high_temperature_approaches_uniform():
    theta, phi, n = random_case(np.random.default_rng(6))
    p = probabilities(theta, phi, 1e6)
    assert np.abs(p - 1.0 / n).max() < 1e-5


def test_snapshot():
    theta = np.ones((2, 3))
    snap = snapshot(theta, "reference", 0)
    theta[0, 0] = 5.0
    assert snap.params[0, 0] == 1.0
    with pytest.raises(ValueError):
        snap.params[0, 0] = 2.0
    assert snapshot(snap, "reference", 0) == snap
    assert snapshot(snap, "old", 0) != snap
    with pytest.raises(ValueError):
        snapshot(theta, "live")


def test_vocabulary_and_rendering():
    vocab = ActionVocabulary(["diet", "pet"])
    assert [(a.kind, a.arg) for a in vocab.actions] == [
        ("think", "plan"),
        ("think", "reflect"),
        ("search", "diet"),
        ("search", "pet"),
        ("answer", "direct"),
        ("answer", "latest"),
        ("answer", "all"),
    ]
    assert vocab.allowed(allow_search=False) == (True, True, False, False, True, True, True)
    ctx = RolloutContext("What about my diet?")
    assert isinstance(vocab.render(0, ctx), Think)
    assert vocab.render(vocab.index("search", "pet"), ctx) == Search("pet")
    a, b, c = (UserDocument("a", "my diet is vegan"), UserDocument("b", "b text"), UserDocument("c", "my pet is cat"))
    ctx.observe([a, b])
    ctx.observe([c, a])
    direct = vocab.render(vocab.index("answer", "direct"), ctx)
    latest = vocab.render(vocab.index("answer", "latest"), ctx)
    everything = vocab.render(vocab.index("answer", "all"), ctx)
    assert isinstance(direct, Answer) and "vegan" not in direct.text
    assert "cat" in latest.text and "b text" not in latest.text
    assert everything.text.count("vegan") == 1 and "b text" in everything.text and "cat" in everything.text
    with pytest.raises(ValueError):
        ActionVocabulary([])
    with pytest.raises(ValueError):
        ActionVocabulary(["a", "a"])


def test_feature_map():
    fm = FeatureMap(["diet", "pet"], max_search_turns=2)
    assert fm.dimension == 2 + 4 * 2 + 3 + 3
    ctx = RolloutContext("Given my diet, what should I eat?")
    phi = fm(ctx)
    assert phi[0] == 1.0
    assert phi[1:3].tolist() == [1.0, 0.0]  # mentioned
    assert phi[fm.pending_offset : fm.pending_offset + 2].tolist() == [1.0, 0.0]
    assert phi[fm.pending_count] == 1.0
    ctx.searches.append("diet")
    ctx.observe([UserDocument("a", "my pet is a cat")])
    phi2 = fm(ctx)
    assert phi2[3:5].tolist() == [1.0, 0.0]  # searched
    assert phi2[5:7].tolist() == [0.0, 1.0]  # seen in retrieved text
    assert phi2[fm.pending_count] == 0.0
    assert np.array_equal(phi2, fm(ctx))


def test_init_params_encode_prior(env):
    theta = init_params(env.vocab, env.features)
    p = probabilities(theta, env.features(RolloutContext("q")))
    kinds = [a.kind for a in env.vocab.actions]
    assert sum(pi for pi, k in zip(p, kinds) if k == "search") == pytest.approx(0.4)
    assert sum(pi for pi, k in zip(p, kinds) if k == "answer") == pytest.approx(0.4)


def test_oracle_policy_scores_full_reward(world, env):
    theta = oracle_params(env.vocab, env.features)
    summary = evaluate(world, theta, GrpoConfig(), seed=0, env=env, greedy=True)
    assert summary["mean_reward"] == 1.0
