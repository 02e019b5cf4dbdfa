import itertools

import numpy as np
import pytest

from protoad import prototypes as proto
from protoad.data import ValidationError
from protoad.mathcore import l2_normalize


def _unit_rows(n, d, rng):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def best_two_partition(X):
    """Exhaustive spherical 2-means oracle: maximize (||sum_A|| + ||sum_B||)/n."""
    n = len(X)
    best_obj, best_mask = -np.inf, None
    for bits in range(1, 2 ** (n - 1)):
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        if mask.all() or not mask.any():
            continue
        obj = (np.linalg.norm(X[mask].sum(axis=0))
               + np.linalg.norm(X[~mask].sum(axis=0))) / n
        if obj > best_obj:
            best_obj, best_mask = obj, mask
    return best_obj, best_mask


def test_fit_k1_normalized_mean():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    result = proto.fit(X, k=1, seed=0)
    assert np.allclose(result.vectors[0], l2_normalize([1.0, 1.0]), atol=1e-12)


def test_fit_k_equals_n():
    rng = np.random.default_rng(0)
    X = _unit_rows(6, 4, rng)
    result = proto.fit(X, k=6, seed=1)
    assert result.objective_trace[-1] == pytest.approx(1.0, abs=1e-12)
    sims = X @ result.vectors.T
    assert np.allclose(np.max(sims, axis=1), 1.0, atol=1e-9)


def test_fit_antipodal_clusters():
    rng = np.random.default_rng(2)
    base = l2_normalize(rng.normal(size=5))
    cluster_a = np.stack([l2_normalize(base + 0.01 * rng.normal(size=5))
                          for _ in range(10)])
    cluster_b = -cluster_a
    X = np.vstack([cluster_a, cluster_b])
    result = proto.fit(X, k=2, seed=3)
    sims = result.vectors @ np.stack([base, -base]).T
    # one prototype per direction
    assert sorted(np.argmax(sims, axis=1).tolist()) == [0, 1]
    assert np.min(np.max(sims, axis=1)) > 0.99


def test_fit_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for trial in range(20):
        n = int(rng.integers(4, 13))
        X = _unit_rows(n, 3, rng)
        result = proto.fit(X, k=2, seed=trial, n_init=20)
        got = proto.assign(X, result)
        _, best_mask = best_two_partition(X)
        groups = {frozenset(np.flatnonzero(got == 0).tolist()),
                  frozenset(np.flatnonzero(got == 1).tolist())}
        expect = {frozenset(np.flatnonzero(best_mask).tolist()),
                  frozenset(np.flatnonzero(~best_mask).tolist())}
        assert groups == expect, f"trial {trial}: {groups} != {expect}"


def test_fit_objective_nondecreasing():
    rng = np.random.default_rng(5)
    for trial in range(50):
        X = _unit_rows(int(rng.integers(8, 40)), 4, rng)
        result = proto.fit(X, k=int(rng.integers(2, 6)), seed=trial)
        trace = result.objective_trace
        assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))


def test_fit_unit_norm_centroids():
    rng = np.random.default_rng(6)
    X = _unit_rows(40, 8, rng)
    result = proto.fit(X, k=5, seed=0)
    assert np.allclose(np.linalg.norm(result.vectors, axis=1), 1.0, atol=1e-9)


def test_fit_deterministic():
    rng = np.random.default_rng(7)
    X = _unit_rows(30, 6, rng)
    a = proto.fit(X, k=4, seed=11)
    b = proto.fit(X, k=4, seed=11)
    assert np.array_equal(a.vectors, b.vectors)
    assert a.objective_trace == b.objective_trace


def test_fit_rejects_k_above_n():
    rng = np.random.default_rng(8)
    with pytest.raises(ValidationError):
        proto.fit(_unit_rows(3, 4, rng), k=4)


def test_prototype_set_rejects_non_unit():
    with pytest.raises(ValidationError):
        proto.PrototypeSet(np.array([[1.0, 1.0]]))


def test_refresh_period_none_never_refreshes():
    rng = np.random.default_rng(9)
    X = _unit_rows(20, 4, rng)
    state = proto.fit(X, k=2, seed=0)
    out = proto.refresh(state, X, epoch=50, period=None)
    assert out is state


def test_refresh_every_epoch():
    rng = np.random.default_rng(10)
    X = _unit_rows(20, 4, rng)
    state = proto.fit(X, k=2, seed=0)
    for epoch in (1, 2, 3):
        nxt = proto.refresh(state, X, epoch=epoch, period=1)
        assert nxt.last_refresh_epoch == epoch
        state = nxt


def test_refresh_period_three():
    rng = np.random.default_rng(11)
    X = _unit_rows(20, 4, rng)
    state = proto.fit(X, k=2, seed=0)
    refreshed_at = []
    for epoch in range(1, 10):
        nxt = proto.refresh(state, X, epoch=epoch, period=3)
        if nxt is not state:
            refreshed_at.append(epoch)
        state = nxt
    assert refreshed_at == [3, 6, 9]


def test_refresh_warm_start_tracks_drifting_embeddings():
    # Small drift, as between fine-tuning epochs: the warm start keeps pace
    # with a cold refit.
    rng = np.random.default_rng(12)
    X = _unit_rows(30, 4, rng)
    state = proto.fit(X, k=3, seed=0)
    drifted = X + 0.02 * rng.normal(size=X.shape)
    drifted /= np.linalg.norm(drifted, axis=1, keepdims=True)
    warm = proto.refresh(state, drifted, epoch=1, period=1)
    cold = proto.fit(drifted, k=3, seed=0)
    assert np.allclose(np.linalg.norm(warm.vectors, axis=1), 1.0, atol=1e-9)
    assert warm.objective_trace[-1] >= cold.objective_trace[-1] - 1e-9
