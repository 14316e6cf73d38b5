from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oorl.oracle import (
    ExactDistribution,
    binary_reward,
    exact_rl_fit,
    implicit_reward_identity_check,
    log_partition_function,
    optimal_policy,
    oracle_suite,
    partition_function,
    policy_distribution,
    policy_from_distribution,
    random_instance,
    total_variation,
    uniform_reference,
)
from oorl.policy import EnumerationCapExceeded, Prompt, enumerate_distribution, init_tabular, snapshot

instances = st.tuples(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 4))


@settings(max_examples=40, deadline=None)
@given(instances, st.floats(0.05, 5.0), st.floats(-3, 3))
def test_partition_function_closed_forms(inst, beta, c):
    ref, prompt, _ = random_instance(*inst)
    assert abs(partition_function(ref, prompt, lambda y: 0.0, beta) - 1.0) < 1e-9
    zc = partition_function(ref, prompt, lambda y: c, beta)
    assert abs(zc - math.exp(c / beta)) <= 1e-9 * max(1.0, math.exp(c / beta))


@settings(max_examples=30, deadline=None)
@given(instances, st.floats(0.1, 5.0))
def test_binary_reward_partition_function_on_uniform_reference(inst, beta):
    seed, vocab, max_len = inst
    template, prompt, reward = random_instance(seed, vocab, max_len)
    ref = uniform_reference(template, prompt)
    dist = enumerate_distribution(ref, prompt)
    n = len(dist)
    assert all(abs(p - 1 / n) < 1e-12 for _, p in dist)
    k = sum(reward(y) for y, _ in dist)
    closed = (k * math.exp(1 / beta) + (n - k)) / n
    assert partition_function(ref, prompt, reward, beta) == pytest.approx(closed, rel=1e-9)


def test_log_partition_function_survives_tiny_beta():
    ref, prompt, reward = random_instance(1)
    log_z = log_partition_function(ref, prompt, reward, 1e-4)
    assert math.isfinite(log_z) and log_z > 9000
    with pytest.raises(OverflowError):
        partition_function(ref, prompt, reward, 1e-4)


def test_optimal_policy_limits():
    ref, prompt, reward = random_instance(4)
    base = policy_distribution(ref, prompt)
    zero = optimal_policy(ref, prompt, lambda y: 0.0, 0.7)
    assert np.max(np.abs(zero.probs - base.probs)) < 1e-12
    assert total_variation(optimal_policy(ref, prompt, reward, 1e6), base) < 1e-5
    sharp = optimal_policy(ref, prompt, reward, 0.01)
    mass = sum(p for y, p in sharp.entries if reward(y) == 1.0)
    assert mass >= 1 - 1e-6


@settings(max_examples=40, deadline=None)
@given(instances, st.floats(0.01, 10.0))
def test_optimal_policy_is_a_distribution(inst, beta):
    ref, prompt, reward = random_instance(*inst)
    dist = optimal_policy(ref, prompt, reward, beta)
    assert np.all(dist.probs >= 0)
    assert abs(dist.probs.sum() - 1) <= 1e-9
    assert dist.Z > 0 and math.isfinite(dist.Z)


@settings(max_examples=40, deadline=None)
@given(instances, st.sampled_from([0.05, 0.5, 1.0, 3.0]))
def test_implicit_reward_identity(inst, beta):
    ref, prompt, reward = random_instance(*inst)
    star = optimal_policy(ref, prompt, reward, beta)
    fitted = policy_from_distribution(star, ref)
    assert total_variation(policy_distribution(fitted, prompt), star) < 1e-12
    assert implicit_reward_identity_check(fitted, ref, prompt, reward, beta) < 1e-8


def test_identity_with_zero_reward_is_exact_zero_on_both_sides():
    ref, prompt, _ = random_instance(2)
    zero = lambda y: 0.0
    assert log_partition_function(ref, prompt, zero, 0.5) == pytest.approx(0.0, abs=1e-15)
    fitted = policy_from_distribution(optimal_policy(ref, prompt, zero, 0.5), ref)
    assert implicit_reward_identity_check(fitted, ref, prompt, zero, 0.5) < 1e-12


def test_identity_detects_a_wrong_policy():
    ref, prompt, reward = random_instance(3)
    assert implicit_reward_identity_check(snapshot(ref), ref, prompt, reward, 0.5) > 0.1


def test_total_variation_properties():
    prompt = Prompt(0, ())
    a = ExactDistribution(prompt, [((0,), 1.0), ((1,), 0.0)], 1.0)
    b = ExactDistribution(prompt, [((0,), 0.0), ((1,), 1.0)], 1.0)
    assert total_variation(a, a) == 0.0
    assert total_variation(a, b) == 1.0
    ref, p, reward = random_instance(5)
    x, y = optimal_policy(ref, p, reward, 0.3), policy_distribution(ref, p)
    assert total_variation(x, y) == total_variation(y, x)
    c = ExactDistribution(prompt, [((1,), 1.0), ((0,), 0.0)], 1.0)
    with pytest.raises(ValueError):
        total_variation(a, c)


def test_exact_distribution_invariants():
    prompt = Prompt(0, ())
    with pytest.raises(ValueError):
        ExactDistribution(prompt, [((0,), 0.6), ((1,), 0.6)], 1.0)
    with pytest.raises(ValueError):
        ExactDistribution(prompt, [((0,), 1.0)], 0.0)


def test_errors():
    ref, prompt, reward = random_instance(0)
    with pytest.raises(ValueError):
        optimal_policy(ref, prompt, reward, 0.0)
    big = snapshot(init_tabular(1, 14, 8))
    with pytest.raises(EnumerationCapExceeded):
        partition_function(big, prompt, reward, 1.0)


def test_binary_reward():
    r = binary_reward([(1, 2), [3]])
    assert r((1, 2)) == 1.0 and r((3,)) == 1.0 and r((2,)) == 0.0


def test_exact_rl_fit_reaches_optimal_policy():
    ref, prompt, reward = random_instance(0, 3, 3)
    start = total_variation(policy_distribution(ref, prompt), optimal_policy(ref, prompt, reward, 0.2))
    fit = exact_rl_fit(ref, prompt, reward, 0.2, tol=0.02)
    assert start > 0.3
    assert fit.converged and fit.tv <= 0.02
    assert fit.history[0][1] == pytest.approx(start)


def test_exact_rl_fit_needs_prefix_context():
    ref = snapshot(init_tabular(1, 3, 2))
    with pytest.raises(ValueError):
        exact_rl_fit(ref, Prompt(0, ()), lambda y: 0.0, 0.5, max_steps=1)


def test_oracle_suite_passes():
    checks = oracle_suite(0.5, instances=5)
    assert checks and all(c.passed for c in checks)
    big = oracle_suite(1e6, instances=3)
    assert any("1e+06" in c.name for c in big) and all(c.passed for c in big)
