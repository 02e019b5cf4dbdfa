"""Unsupervised contrastive pre-training of the encoder.

The loss is the two-view instance-discrimination objective: for each anchor,
the positive is its partner view and the denominator runs over all other
embeddings in the doubled batch (the positive included, the anchor itself
excluded). It decomposes exactly into an alignment term (pull positives
together) and a uniformity term (push everything apart); the decomposition
identity is checked in debug mode on every batch.

With shift mode on, every view is additionally expanded over the shifting
transforms, shifted copies act as negatives of each other, and a
cross-entropy term teaches the head to recover the shift index.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import encoder as enc
from .augment import ShiftFamily, WeakAugConfig, weak_batch
from .data import LABELED_ANOMALY, Dataset, ValidationError
from .mathcore import as_f64
from .objective import loss_shift, uniformity_scores_self


@dataclass(frozen=True)
class ContrastiveBatch:
    """Two augmented views of the same samples, one embedding row each."""

    view1: np.ndarray
    view2: np.ndarray
    tau: float

    def __post_init__(self):
        v1 = as_f64(self.view1, "view1")
        v2 = as_f64(self.view2, "view2")
        if v1.shape != v2.shape or v1.ndim != 2:
            raise ValidationError("views must be 2-D arrays of identical shape")
        if len(v1) < 2:
            raise ValidationError("contrastive batch needs at least 2 samples")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")


def _pair_terms(batch: ContrastiveBatch):
    """Shared plumbing: similarity logits, per-anchor logsumexp, softmax."""
    E = np.vstack([batch.view1, batch.view2])
    two_m = len(E)
    partner = (np.arange(two_m) + two_m // 2) % two_m
    sims = (E @ E.T) / batch.tau
    np.fill_diagonal(sims, -np.inf)
    shift = np.max(sims, axis=1, keepdims=True)
    ex = np.exp(sims - shift)
    z = ex.sum(axis=1, keepdims=True)
    lse = (shift + np.log(z))[:, 0]
    pos = sims[np.arange(two_m), partner]
    return E, partner, pos, lse, ex / z


def contrastive_loss(batch: ContrastiveBatch
                     ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss averaged over both view directions, plus gradients per view."""
    E, partner, pos, lse, w = _pair_terms(batch)
    two_m = len(E)
    loss = float(np.mean(lse - pos))
    g = w.copy()
    g[np.arange(two_m), partner] -= 1.0
    g /= two_m * batch.tau
    d_embed = g @ E + g.T @ E
    m = two_m // 2
    return loss, d_embed[:m], d_embed[m:]


def decompose_loss(batch: ContrastiveBatch) -> Tuple[float, float]:
    """(alignment, uniformity) terms; their sum equals the contrastive loss."""
    _, _, pos, lse, _ = _pair_terms(batch)
    return float(np.mean(-pos)), float(np.mean(lse))


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    tau: float = 0.5
    shift_mode: bool = False
    seed: int = 0
    probe_size: int = 128
    debug_identity: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ValidationError("need epochs >= 0 and batch_size >= 2")
        if self.lr <= 0 or not (0.0 <= self.momentum < 1.0):
            raise ValidationError("bad optimizer settings")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")


@dataclass
class PretrainEpochRecord:
    epoch: int
    loss: float
    align: float
    uniform: float
    probe_loss: float
    probe_uniformity_mean: float
    shift_accuracy: Optional[float]
    wallclock: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch, "loss": self.loss, "align": self.align,
            "uniform": self.uniform, "probe_loss": self.probe_loss,
            "probe_uniformity_mean": self.probe_uniformity_mean,
            "shift_accuracy": self.shift_accuracy, "wallclock": self.wallclock,
        }


@dataclass
class PretrainResult:
    params: enc.EncoderParams
    metrics: List[PretrainEpochRecord]
    used_ids: np.ndarray


def _two_views(X, weak_cfg, shifts, shift_mode, rng):
    """Expand a raw batch into two independently weak-augmented views."""
    if shift_mode:
        rows, ids = shifts.expand(X)
    else:
        rows, ids = X, np.zeros(len(X), dtype=np.int64)
    v1 = weak_batch(rows, weak_cfg, rng)
    v2 = weak_batch(rows, weak_cfg, rng)
    return v1, v2, ids


def pretrain_loop(
    dataset: Dataset,
    params: enc.EncoderParams,
    weak_cfg: WeakAugConfig,
    shifts: Optional[ShiftFamily],
    cfg: PretrainConfig,
) -> PretrainResult:
    """Minibatch SGD (with momentum) on the contrastive loss.

    Labeled anomalies are excluded outright; the returned ``used_ids`` lists
    every sample id that contributed so callers can audit that. Record 0 in
    the metrics captures the untouched initial state; with ``epochs=0`` the
    encoder is returned unchanged.
    """
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    if cfg.shift_mode and (shifts is None or shifts.count < 2):
        raise ValidationError("shift mode requires a shift family with >= 2 transforms")
    params = params.copy()
    keep = np.flatnonzero(dataset.semi != LABELED_ANOMALY)
    if len(keep) < 2:
        raise ValidationError("need at least 2 non-anomalous samples")
    feats = dataset.features[keep]
    used_ids = dataset.ids[keep].copy()

    rng = np.random.default_rng(cfg.seed)
    probe_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    probe_idx = probe_rng.permutation(len(feats))[:min(cfg.probe_size, len(feats))]
    probe_clean = feats[probe_idx]
    pv1, pv2, probe_ids = _two_views(probe_clean, weak_cfg, shifts, cfg.shift_mode, probe_rng)

    velocity = params.zeros_like()
    metrics: List[PretrainEpochRecord] = []

    def probe_record(epoch, ep_loss, ep_align, ep_uniform, t0):
        emb1 = enc.embed(params, pv1)
        emb2 = enc.embed(params, pv2)
        p_loss, _, _ = contrastive_loss(ContrastiveBatch(emb1, emb2, cfg.tau))
        clean_emb = enc.embed(params, probe_clean)
        p_unif = float(np.mean(uniformity_scores_self(clean_emb)))
        acc = None
        if cfg.shift_mode:
            rows, ids = shifts.expand(probe_clean)
            logits = enc.shift_logits(params, rows)
            acc = float(np.mean(np.argmax(logits, axis=1) == ids))
        metrics.append(PretrainEpochRecord(
            epoch=epoch, loss=ep_loss, align=ep_align, uniform=ep_uniform,
            probe_loss=p_loss, probe_uniformity_mean=p_unif,
            shift_accuracy=acc, wallclock=time.time() - t0))

    t0 = time.time()
    probe_record(0, float("nan"), float("nan"), float("nan"), t0)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(feats))
        losses, aligns, uniforms = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            if len(take) < 2:
                continue
            v1, v2, ids = _two_views(feats[take], weak_cfg, shifts, cfg.shift_mode, rng)
            n_rows = len(v1)
            cache = enc.forward(params, np.vstack([v1, v2]))
            batch = ContrastiveBatch(cache.embed[:n_rows], cache.embed[n_rows:], cfg.tau)
            loss, g1, g2 = contrastive_loss(batch)
            align = float(np.mean(-np.sum(batch.view1 * batch.view2, axis=1) / cfg.tau))
            if cfg.debug_identity:
                a, u = decompose_loss(batch)
                if abs(loss - (a + u)) >= 1e-12:
                    raise AssertionError("contrastive decomposition identity violated")
            d_logits = None
            total = loss
            if cfg.shift_mode:
                logits = enc.head_logits(params, cache)
                ce, d_logits = loss_shift(logits, np.tile(ids, 2))
                total += ce
            grads = enc.backward(params, cache,
                                 d_embed=np.vstack([g1, g2]), d_logits=d_logits)
            for f in params.FIELDS:
                v = getattr(velocity, f)
                v *= cfg.momentum
                v -= cfg.lr * getattr(grads, f)
                getattr(params, f).__iadd__(v)
            losses.append(total)
            aligns.append(align)
            uniforms.append(loss - align)
        probe_record(epoch, float(np.mean(losses)), float(np.mean(aligns)),
                     float(np.mean(uniforms)), t0)
    return PretrainResult(params=params, metrics=metrics, used_ids=used_ids)
