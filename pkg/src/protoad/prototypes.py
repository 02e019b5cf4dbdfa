"""Prototype selection by spherical k-means on unit-norm embeddings.

Prototypes are the centroids of a cosine-similarity k-means run over the
embeddings of the (mostly normal) training pool; they act as the subclasses
the energy score is computed against, and are periodically refit during
fine-tuning as the embedding moves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .data import ValidationError
from .mathcore import EPS_NORM, as_f64

_MAX_ITER = 100


@dataclass
class PrototypeSet:
    """k unit-norm prototype vectors plus refresh bookkeeping.

    ``norm_tol`` loosens the unit-norm check for vectors that round-tripped
    through 32-bit storage; freshly fitted sets satisfy the default 1e-9.
    """

    vectors: np.ndarray
    last_refresh_epoch: int = 0
    objective_trace: List[float] = field(default_factory=list)
    norm_tol: float = 1e-9

    def __post_init__(self):
        self.vectors = as_f64(self.vectors, "prototypes")
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ValidationError("prototype set must be a nonempty 2-D array")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > self.norm_tol):
            raise ValidationError(f"prototypes must be unit-norm within {self.norm_tol}")

    @property
    def k(self) -> int:
        return len(self.vectors)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms = np.where(norms <= EPS_NORM, 1.0, norms)
    return m / norms


def _seed_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding under cosine distance (1 - similarity)."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    best_sim = X @ X[chosen[0]]
    while len(chosen) < k:
        dist = np.clip(1.0 - best_sim, 0.0, None)
        dist[chosen] = 0.0
        total = float(dist.sum())
        if total <= 0.0:
            # Every remaining point coincides with a chosen one; pick any unchosen.
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            nxt = int(rng.permutation(remaining)[0])
        else:
            nxt = int(rng.choice(n, p=dist / total))
        chosen.append(nxt)
        best_sim = np.maximum(best_sim, X @ X[nxt])
    return X[np.array(chosen)].copy()


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int
           ) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """Alternate cosine assignment and normalized-mean updates until stable."""
    k = len(centroids)
    assign = None
    trace: List[float] = []
    for _ in range(max_iter):
        sims = X @ centroids.T
        new_assign = np.argmax(sims, axis=1)
        trace.append(float(np.mean(sims[np.arange(len(X)), new_assign])))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        nxt = np.zeros_like(centroids)
        counts = np.bincount(assign, minlength=k)
        np.add.at(nxt, assign, X)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # Re-seed each empty cluster to the point least similar to its
            # own centroid, worst offenders first.
            own = sims[np.arange(len(X)), assign]
            order = np.argsort(own)
            for ptr, e in enumerate(empty):
                pick = int(order[ptr])
                nxt[e] = X[pick]
                counts[e] = 1
        centroids = _normalize_rows(nxt)
    return centroids, assign, trace


def fit(
    embeddings: np.ndarray,
    k: int,
    seed: int = 0,
    init_vectors: Optional[np.ndarray] = None,
    max_iter: int = _MAX_ITER,
    n_init: int = 4,
) -> PrototypeSet:
    """Spherical k-means over unit rows. Deterministic under (inputs, k, seed).

    With ``init_vectors`` the run warm-starts from those centroids (one
    restart); otherwise ``n_init`` k-means++ restarts are run and the best
    final objective wins.
    """
    X = as_f64(embeddings, "embeddings")
    if X.ndim != 2:
        raise ValidationError("embeddings must be 2-D")
    n = len(X)
    if not (1 <= k <= n):
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")

    if init_vectors is not None:
        starts = [_normalize_rows(as_f64(init_vectors, "init_vectors").copy())]
        if len(starts[0]) != k:
            raise ValidationError("init_vectors count must equal k")
    else:
        rng = np.random.default_rng(seed)
        starts = [_seed_plusplus(X, k, rng) for _ in range(max(1, n_init))]

    best = None
    for centroids in starts:
        c, assign, trace = _lloyd(X, centroids, max_iter)
        if best is None or trace[-1] > best[2][-1]:
            best = (c, assign, trace)
    centroids, _, trace = best
    return PrototypeSet(vectors=centroids, last_refresh_epoch=0,
                        objective_trace=trace)


def assign(embeddings: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Nearest-prototype index per row under cosine similarity."""
    return np.argmax(as_f64(embeddings) @ protos.vectors.T, axis=1)


def refresh(
    state: PrototypeSet,
    embeddings: np.ndarray,
    epoch: int,
    period: Optional[int],
    seed: int = 0,
    cold_start: bool = False,
) -> PrototypeSet:
    """Refit prototypes when ``period`` epochs have passed since the last fit.

    ``period=None`` disables refreshing. Warm-starts from the current
    prototypes unless ``cold_start`` is set.
    """
    if period is None:
        return state
    if period < 1:
        raise ValidationError("refresh period must be >= 1")
    if epoch - state.last_refresh_epoch < period:
        return state
    init_vectors = None if cold_start else state.vectors
    fitted = fit(embeddings, state.k, seed=seed, init_vectors=init_vectors)
    return PrototypeSet(vectors=fitted.vectors, last_refresh_epoch=epoch,
                        objective_trace=fitted.objective_trace)
