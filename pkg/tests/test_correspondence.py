import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semitrack.correspondence import (CycleBatch, chain_affinity, cycle_loss, pairwise_affinity,
                                      round_trip, sample_frame_group)


def random_batch(rng, k=None, p_max=4, d=4, scale=1.0):
    k = k or int(rng.integers(1, 4))
    return [rng.normal(size=(int(rng.integers(1, p_max + 1)), d)) * scale for _ in range(k + 1)]


def test_affinity_examples():
    assert np.array_equal(pairwise_affinity([[0.3, 1.0]], [[2.0, -1.0]]), [[1.0]])
    a = pairwise_affinity(np.eye(2), np.eye(2))
    assert np.allclose(a, [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)
    sharp = pairwise_affinity(np.eye(3), np.eye(3), temperature=1e-3)
    assert np.allclose(sharp, np.eye(3))
    with pytest.raises(ValueError):
        pairwise_affinity(np.eye(2), np.eye(2), temperature=0.0)


def test_chain_examples():
    assert np.array_equal(chain_affinity([np.eye(3)] * 4), np.eye(3))
    m = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert np.array_equal(chain_affinity([m]), m)
    n = np.array([[0.5, 0.5], [0.1, 0.9]])
    assert np.allclose(chain_affinity([m, n]), oracles.matmul(m, n))
    with pytest.raises(ValueError):
        chain_affinity([np.ones((2, 3)), np.ones((2, 2))])


def test_cycle_loss_vanishes_on_identical_orthonormal_frames():
    frames = [np.eye(3)] * 3
    assert cycle_loss(CycleBatch(frames), temperature=1e-3).value == pytest.approx(0.0, abs=1e-12)
    assert cycle_loss(CycleBatch(frames), temperature=0.05).value < 1e-6


def test_cycle_batch_rejects_bad_frames():
    with pytest.raises(ValueError):
        CycleBatch([np.eye(2)])
    with pytest.raises(ValueError):
        CycleBatch([np.eye(2), np.zeros((0, 2))])
    with pytest.raises(ValueError):
        CycleBatch([np.eye(2), np.full((2, 2), np.nan)])


def test_cycle_loss_matches_reference():
    rng = np.random.default_rng(4)
    for _ in range(30):
        frames = random_batch(rng)
        t = float(rng.uniform(0.5, 2.0))
        got = cycle_loss(CycleBatch(frames), t).value
        assert got == pytest.approx(oracles.cycle_loss(frames, t), rel=1e-10)


def test_cycle_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(30):
        frames = random_batch(rng)
        t = float(rng.uniform(0.5, 2.0))
        res = cycle_loss(CycleBatch(frames), t)
        for j in range(len(frames)):
            def value(x, j=j):
                fs = list(frames)
                fs[j] = x
                return cycle_loss(CycleBatch(fs), t).value
            assert oracles.rel_err(res.grad[j], oracles.central_diff(value, frames[j])) < 1e-4


def test_sampler_examples():
    for seed in range(50):
        idx = sample_frame_group(30, 1, seed)
        assert len(idx) == 2 and 2 <= idx[1] - idx[0] <= 8 and idx[1] < 30
    assert sample_frame_group(30, 3, 7) == sample_frame_group(30, 3, 7)
    with pytest.raises(ValueError):
        sample_frame_group(30, 0)
    with pytest.raises(ValueError):
        sample_frame_group(10, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_chained_affinity_is_row_stochastic(seed):
    rng = np.random.default_rng(seed)
    frames = random_batch(rng, scale=2.0)
    r = round_trip(CycleBatch(frames))
    assert r.shape == (len(frames[0]), len(frames[0]))
    assert np.allclose(r.sum(axis=1), 1.0, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cycle_loss_nonnegative_and_zero_only_on_unit_diagonal(seed):
    rng = np.random.default_rng(seed)
    frames = random_batch(rng)
    batch = CycleBatch(frames)
    value = cycle_loss(batch).value
    assert value >= 0
    diag = np.diag(round_trip(batch))
    assert (value == 0) == bool(np.all(diag >= 1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cycle_loss_invariant_to_instance_permutation(seed):
    rng = np.random.default_rng(seed)
    frames = random_batch(rng)
    permuted = [f[rng.permutation(len(f))] for f in frames]
    assert cycle_loss(CycleBatch(frames)).value == pytest.approx(
        cycle_loss(CycleBatch(permuted)).value, rel=1e-10)


def test_affinity_size_scales_with_instances_not_cells():
    a = pairwise_affinity(np.ones((3, 8)), np.ones((5, 8)))
    assert a.shape == (3, 5)
