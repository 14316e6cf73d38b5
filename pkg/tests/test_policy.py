from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oorl import autodiff as ad
from oorl.policy import (
    ARGMAX_TEMPERATURE,
    BoundPolicy,
    EnumerationCapExceeded,
    Prompt,
    enumerate_distribution,
    enumerate_log_distribution,
    init_tabular,
    log_prob,
    sample,
    snapshot,
    validate_sequence,
)

P0 = Prompt(0, (1, 2, 3))


def test_uniform_init_and_seed_determinism():
    pol = init_tabular(2, 5, 6, 0.0, seed=1)
    assert np.all(pol.table == 0)
    a = init_tabular(3, 4, 5, 0.7, seed=9)
    b = init_tabular(3, 4, 5, 0.7, seed=9)
    assert a.table.tobytes() == b.table.tobytes()
    assert np.all(np.abs(a.table) <= 0.7)
    with pytest.raises(ValueError):
        init_tabular(0, 4, 5)
    with pytest.raises(ValueError):
        init_tabular(1, 4, 5, -1.0)


def test_uniform_length_six_probability():
    pol = init_tabular(1, 5, 6)
    y = (0, 1, 2, 3, 0, 1)
    assert math.exp(log_prob(pol, P0, y)) == pytest.approx(5.0**-6, rel=1e-12)


def test_uniform_log_prob_value():
    pol = init_tabular(1, 5, 6)
    assert log_prob(pol, P0, (0, 1, 4)) == pytest.approx(-4.828314, abs=1e-6)


@pytest.mark.parametrize("context", ["position", "prefix"])
def test_differentiable_log_prob_matches_plain(context):
    pol = init_tabular(2, 5, 4, 1.0, seed=3, context=context)
    y = (2, 0, 3, 4)
    node = log_prob(pol, Prompt(1, ()), y, differentiable=True)
    assert isinstance(node, ad.Node)
    assert node.value == pytest.approx(log_prob(pol, Prompt(1, ()), y), abs=1e-14)


def test_sequence_validation():
    pol = init_tabular(1, 5, 3)
    for bad in [(5,), (-1,), (4, 0), (0, 1, 2, 3)]:
        with pytest.raises(ValueError):
            log_prob(pol, P0, bad)
    with pytest.raises(KeyError):
        log_prob(pol, Prompt(3, ()), (0,))
    validate_sequence(pol, (0, 1, 4))


@pytest.mark.parametrize("context", ["position", "prefix"])
def test_enumeration_sums_to_one_and_matches_log_prob(context):
    pol = init_tabular(1, 4, 4, 2.0, seed=5, context=context)
    dist = enumerate_distribution(pol, P0)
    assert sum(p for _, p in dist) == pytest.approx(1.0, abs=1e-9)
    for y, p in dist:
        assert p >= 0
        assert abs(math.exp(log_prob(pol, P0, y)) - p) < 1e-12


def test_small_enumeration_count():
    dist = enumerate_distribution(init_tabular(1, 2, 2), P0)
    # eos alone, then 0 followed by either token
    assert [y for y, _ in dist] == [(0, 0), (0, 1), (1,)]
    assert len(dist) <= 6


def test_uniform_same_length_sequences_equiprobable():
    dist = enumerate_distribution(init_tabular(1, 3, 3), P0)
    by_len: dict = {}
    for y, p in dist:
        by_len.setdefault(len(y), set()).add(round(p, 14))
    assert all(len(v) == 1 for v in by_len.values())


def test_enumeration_cap():
    with pytest.raises(EnumerationCapExceeded):
        enumerate_distribution(init_tabular(1, 14, 8), P0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.integers(0, 3))
def test_softmax_shift_invariance(seed, c, pos):
    pol = init_tabular(1, 4, 4, 1.5, seed=seed)
    rng = np.random.default_rng(seed)
    y = tuple(int(t) for t in rng.integers(0, 3, size=4))
    before = log_prob(pol, P0, y)
    pol.table[pos] += c
    assert abs(log_prob(pol, P0, y) - before) < 1e-12


def test_shift_invariance_of_distribution_prefix_context():
    pol = init_tabular(1, 3, 3, 1.0, seed=2, context="prefix")
    before = enumerate_distribution(pol, P0)
    key = pol.key(0, (1,))
    pol.set_row(key, pol.row(key) + 7.5)
    after = enumerate_distribution(pol, P0)
    for (y, p), (y2, q) in zip(before, after):
        assert y == y2 and abs(p - q) < 1e-12


def test_sample_determinism_and_validity():
    pol = init_tabular(2, 6, 5, 1.0, seed=4)
    a = [sample(pol, P0, s) for s in range(50)]
    b = [sample(pol, P0, s) for s in range(50)]
    assert a == b
    for y in a:
        validate_sequence(pol, y)
        assert len(y) == pol.max_len or y[-1] == pol.eos_id
    with pytest.raises(ValueError):
        sample(pol, P0, 0, temperature=0.0)


def test_argmax_mode_breaks_ties_to_lowest_id():
    pol = init_tabular(1, 4, 3)
    assert sample(pol, P0, 0, ARGMAX_TEMPERATURE) == (0, 0, 0)
    pol.table[1] = [0.0, 2.0, 2.0, 0.0]
    assert sample(pol, P0, 123, 1e-7) == (0, 1, 0)


def test_sample_frequencies_binomial():
    pol = init_tabular(1, 3, 1)
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.bincount([sample(pol, P0, rng)[0] for _ in range(n)], minlength=3)
    sigma = math.sqrt((1 / 3) * (2 / 3) / n)
    assert np.all(np.abs(counts / n - 1 / 3) <= 3 * sigma)


def test_snapshot_is_frozen_copy():
    pol = init_tabular(1, 4, 3, 1.0, seed=1)
    snap = snapshot(pol)
    y = (1, 2, 3)
    lp = log_prob(snap, P0, y)
    assert lp == log_prob(pol, P0, y)
    pol.table += 1.0
    pol.table[0, 1] += 3.0
    assert log_prob(snap, P0, y) == lp
    assert snap.frozen and not pol.frozen
    with pytest.raises(RuntimeError):
        snap.set_row(snap.key(0, ()), np.zeros(4))


def test_frozen_rows_never_receive_gradients():
    pol = init_tabular(1, 4, 3, 1.0, seed=1)
    snap = snapshot(pol)
    live, frozen = BoundPolicy(pol), BoundPolicy(snap)
    loss = log_prob(live, P0, (1, 3), True) - log_prob(frozen, P0, (1, 3), True)
    grads = ad.backward(loss)
    assert frozen.gradients(grads) == {}
    assert frozen.params() == []
    assert set(live.gradients(grads)) == {(0, 0), (0, 1)}


def test_prefix_rows_are_lazy_and_deterministic():
    a = init_tabular(2, 5, 4, 0.5, seed=3, context="prefix")
    b = init_tabular(2, 5, 4, 0.5, seed=3, context="prefix")
    assert len(a.table) == 0
    key = a.key(1, (2, 0))
    np.testing.assert_array_equal(a.row(key), b.row(key))
    a.ensure_row(key)
    assert len(a.table) == 1
    np.testing.assert_array_equal(a.row(key), b.row(key))


def test_log_distribution_is_consistent():
    pol = init_tabular(1, 3, 3, 1.0, seed=8, context="prefix")
    for (y, lp), (y2, p) in zip(enumerate_log_distribution(pol, P0), enumerate_distribution(pol, P0)):
        assert y == y2 and math.exp(lp) == pytest.approx(p, rel=1e-12)
