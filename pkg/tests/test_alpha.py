import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goalunlearn.alpha import AlphaPolicy, AlphaRecord, AlphaTrace, reinforce_update, reward_from_loss, sample_alpha
from goalunlearn.objectives import LossBreakdown


def run_bandit(seed, steps=2000, optimum=2.0):
    rng = np.random.default_rng(seed)
    policy = AlphaPolicy()
    for _ in range(steps):
        a, eps = sample_alpha(policy, rng)
        policy = reinforce_update(policy, eps, -((math.log(a) - optimum) ** 2))
    return policy


def test_sigma_zero_is_deterministic():
    rng = np.random.default_rng(0)
    p = AlphaPolicy(theta=0.7, sigma=0.0)
    assert {sample_alpha(p, rng)[0] for _ in range(5)} == {math.exp(0.7)}
    assert sample_alpha(AlphaPolicy(theta=0.0, sigma=0.0), rng)[0] == 1.0


def test_log_alpha_monte_carlo():
    rng = np.random.default_rng(0)
    p = AlphaPolicy(theta=1.0, sigma=0.1)
    logs = [math.log(sample_alpha(p, rng)[0]) for _ in range(10_000)]
    assert abs(np.mean(logs) - 1.0) < 0.01


def test_zero_advantage_keeps_theta():
    p = AlphaPolicy(theta=0.3, baseline=-1.0, initialized=True)
    q = reinforce_update(p, 1.5, -1.0)
    assert q.theta == 0.3 and q.baseline == -1.0


def test_positive_advantage_with_positive_eps_raises_theta():
    p = AlphaPolicy(theta=0.3, baseline=-1.0, initialized=True)
    q = reinforce_update(p, 0.5, 0.0)
    assert q.theta > p.theta
    assert q.theta == pytest.approx(0.3 + 1e-2 * 1.0 * 0.5 / 0.1)
    assert q.baseline == pytest.approx(0.9 * -1.0 + 0.1 * 0.0)


def test_first_update_seeds_baseline():
    q = reinforce_update(AlphaPolicy(), 2.0, -5.0)
    assert q.theta == 0.0 and q.baseline == -5.0 and q.initialized


def test_nonfinite_reward_rejected():
    with pytest.raises(ValueError):
        reinforce_update(AlphaPolicy(), 0.1, float("nan"))


def test_policy_validation():
    with pytest.raises(ValueError):
        AlphaPolicy(sigma=-0.1)
    with pytest.raises(ValueError):
        AlphaPolicy(ema_decay=1.0)


def test_reward_examples():
    assert reward_from_loss(LossBreakdown(0.0, 0.0, 3.0, 0.0)) == 0.0
    assert reward_from_loss(LossBreakdown(1.0, 2.0, 123.0, 247.0), alpha_ref=1.0) == -3.0
    rewards = [reward_from_loss(LossBreakdown(1.0, r, 1.0, 1.0 + r)) for r in (0.0, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(rewards, rewards[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_bandit_converges(seed):
    assert abs(run_bandit(seed).theta - 2.0) < 0.3


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(0, 3), st.integers(0, 2**31 - 1))
def test_alpha_always_positive(theta, sigma, seed):
    a, eps = sample_alpha(AlphaPolicy(theta=theta, sigma=sigma), np.random.default_rng(seed))
    assert a > 0
    assert a == math.exp(theta + sigma * eps)


def test_trace_csv():
    t = AlphaTrace([AlphaRecord(0, 1.5, 0.2, -3.0, -3.0, 0.0)])
    assert len(t) == 1
    assert t.to_csv().splitlines() == ["step,alpha,reward,baseline,theta", "0,1.5,-3.0,-3.0,0.0"]
