import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracehunt import features
from tracehunt.classifier import Verdict
from tracehunt.oracle import ScorerParams, encode_context, prior_params, score_heuristic
from tracehunt.refine import (
    DetectionRecord, compute_rewards, grad_log_likelihood, log_likelihood, policy_gradient, policy_update,
    read_history, reward, write_history,
)
from tracehunt.solver import PathConstraint

M, B = Verdict.MALICIOUS, Verdict.BENIGN


def ctx(rng: np.random.Generator):
    return encode_context(PathConstraint(), "", rng.integers(0, 5, features.DIM).astype(float))


def record(rng, label, omega):
    return DetectionRecord(ctx(rng), label, omega)


@pytest.mark.parametrize("label, omega, want", [
    (M, 0.8, 0.8), (B, 0.5, -0.05), (M, 0.0, 0.0), (B, 0.0, 0.0), (M, 1.0, 1.0), (B, 1.0, -0.1), (B, 0.25, -0.025),
])
def test_reward_table(label, omega, want):
    assert reward(label, omega) == pytest.approx(want, abs=1e-15)


def test_compute_rewards_vector():
    rng = np.random.default_rng(0)
    hist = [record(rng, M, 0.8), record(rng, B, 0.5), record(rng, B, 0.0)]
    assert compute_rewards(hist).tolist() == pytest.approx([0.8, -0.05, 0.0])


def test_zero_rewards_leave_params_unchanged():
    rng = np.random.default_rng(1)
    hist = [record(rng, M, 0.0), record(rng, B, 0.0)]
    params = prior_params()
    assert policy_update(params, hist, 0.7) == params


def test_positive_reward_raises_rescored_omega():
    rng = np.random.default_rng(2)
    params = prior_params()
    rec = record(rng, M, score_heuristic(ctx(rng), params))
    before = score_heuristic(rec.context, params)
    after = score_heuristic(rec.context, policy_update(params, [rec], 0.1))
    assert after > before


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_log_likelihood_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0, 0.3, features.DIM + 1)
    c = ctx(rng)
    g = grad_log_likelihood(theta, c)
    h = 1e-6
    for k in rng.choice(features.DIM + 1, 8, replace=False):
        e = np.zeros_like(theta)
        e[k] = h
        fd = (log_likelihood(theta + e, c) - log_likelihood(theta - e, c)) / (2 * h)
        assert abs(fd - g[k]) <= 1e-6 * max(abs(fd), abs(g[k]), 1e-3)


def test_policy_gradient_is_mean_of_weighted_scores():
    rng = np.random.default_rng(3)
    params = ScorerParams(tuple(rng.normal(0, 0.2, features.DIM)), 0.3)
    hist = [record(rng, random.Random(i).choice([M, B]), float(rng.uniform())) for i in range(7)]
    want = sum(reward(r.label, r.omega) * grad_log_likelihood(params.theta, r.context) for r in hist) / len(hist)
    assert np.allclose(policy_gradient(params, hist), want, rtol=1e-12, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**9), c=st.floats(0.1, 10))
def test_step_scales_linearly_with_alpha(seed, c):
    rng = np.random.default_rng(seed)
    params = prior_params()
    hist = [record(rng, M if rng.random() < 0.5 else B, float(rng.uniform())) for _ in range(5)]
    d1 = policy_update(params, hist, 0.01).theta - params.theta
    dc = policy_update(params, hist, 0.01 * c).theta - params.theta
    assert np.allclose(dc, c * d1, rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_all_positive_rewards_do_not_lower_mean_score(seed):
    rng = np.random.default_rng(seed)
    params = ScorerParams(tuple(rng.normal(0, 0.3, features.DIM)), float(rng.normal()))
    hist = [record(rng, M, float(rng.uniform(0.01, 1))) for _ in range(rng.integers(1, 8))]
    mean = lambda p: np.mean([score_heuristic(r.context, p) for r in hist])  # noqa: E731
    assert mean(policy_update(params, hist, 1e-3)) >= mean(params) - 1e-15


def test_update_rejects_bad_inputs():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        policy_update(prior_params(), [record(rng, M, 0.5)], 0.0)
    with pytest.raises(ValueError):
        policy_update(prior_params(), [], 0.1)
    bad = DetectionRecord(encode_context(PathConstraint(), "", [1.0, 2.0]), M, 0.5)
    with pytest.raises(ValueError):
        policy_update(prior_params(), [bad], 0.1)
    with pytest.raises(ValueError):
        DetectionRecord(ctx(rng), M, 1.5)


def test_history_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    hist = [record(rng, M, 0.8), record(rng, B, math.pi / 10)]
    path = tmp_path / "h.jsonl"
    write_history(path, hist, extra=[{"program": "a"}, {"program": "b"}])
    assert read_history(path) == hist
    assert len(path.read_text().splitlines()) == 2
