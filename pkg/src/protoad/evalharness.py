"""Fine-tuning, metrics, early stopping, and the experiment drivers.

AUROC is computed rank-wise (average ranks for ties), so every reported
number is invariant under monotone transforms of the scores. The early-stop
signal needs no labels: it is the AUROC separating weakly-augmented samples
from weakly-augmented *strong* distortions of the same held-out split, and
the fine-tuning loop keeps whichever epoch maximizes it.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoder as enc
from . import objective as obj
from . import prototypes as proto
from .augment import ShiftFamily, StrongAugConfig, WeakAugConfig, strong_batch, weak_batch
from .data import LABELED_ANOMALY, Dataset, ValidationError
from .mathcore import as_f64, logsumexp_rows
from .pretrain import PretrainConfig, pretrain_loop


# --------------------------------------------------------------------------
# Rank statistics
# --------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(score_normal > score_anomaly) + 0.5 * P(tie); labels 1=normal, 0=anomaly."""
    s = as_f64(scores, "scores")
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and aligned")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("auroc needs both classes present")
    ranks = _average_ranks(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = as_f64(xs, "xs")
    y = as_f64(ys, "ys")
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError("pearson needs two aligned vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise ValidationError("pearson undefined for zero variance")
    return float(np.dot(dx, dy) / np.sqrt(vx * vy))


def spearman(xs, ys) -> float:
    """Rank correlation: Pearson over average ranks."""
    return pearson(_average_ranks(as_f64(xs)), _average_ranks(as_f64(ys)))


# --------------------------------------------------------------------------
# Early stopping
# --------------------------------------------------------------------------

def earlystop_score(
    params: enc.EncoderParams,
    protos: proto.PrototypeSet,
    validation: Dataset,
    weak_cfg: WeakAugConfig,
    strong_cfg: StrongAugConfig,
    shifts: Optional[ShiftFamily],
    rng: np.random.Generator,
) -> float:
    """Label-free validation AUROC: originals vs strong distortions.

    View A is a weak draw of each held-out sample, view B a weak draw of a
    strong distortion of it. Both views are expanded over every shifting
    transform; a sample's score is the sum over shifts of the raw-similarity
    energy against the prototypes. Originals get label 1.
    """
    if len(validation) == 0:
        raise ValidationError("validation set is empty")
    X = validation.features
    view_a = weak_batch(X, weak_cfg, rng)
    view_b = weak_batch(strong_batch(X, strong_cfg, rng), weak_cfg, rng)

    def per_view(rows):
        expanded = shifts.expand(rows)[0] if shifts is not None else rows
        emb = enc.embed(params, expanded)
        per_shift = logsumexp_rows(emb @ protos.vectors.T)
        k = shifts.count if shifts is not None else 1
        return per_shift.reshape(k, len(rows)).sum(axis=0)

    scores = np.concatenate([per_view(view_a), per_view(view_b)])
    labels = np.concatenate([np.ones(len(X), dtype=np.int64),
                             np.zeros(len(X), dtype=np.int64)])
    return auroc(scores, labels)


# --------------------------------------------------------------------------
# Fine-tuning loop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    tau: float = 0.5
    loss_name: str = "elsa"
    shift_mode: bool = False
    shift_loss_weight: float = 1.0
    refresh_period: Optional[int] = 1
    refresh_cold: bool = False
    c_mode: str = "canonical"
    strict_scores: bool = True
    seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("bad fine-tune settings")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.loss_name not in obj.LOSSES:
            raise ValidationError(f"unknown loss {self.loss_name!r}")


@dataclass
class MetricsRecord:
    epoch: int
    loss: Dict[str, float]
    earlystop_auroc: float
    test_auroc: Optional[float]
    prototype_refresh_flag: bool
    wallclock: float
    mean_score_anomaly: Optional[float] = None
    mean_score_normal: Optional[float] = None

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss,
                "earlystop_auroc": self.earlystop_auroc,
                "test_auroc": self.test_auroc,
                "prototype_refresh_flag": self.prototype_refresh_flag,
                "wallclock": self.wallclock,
                "mean_score_anomaly": self.mean_score_anomaly,
                "mean_score_normal": self.mean_score_normal}


@dataclass
class RunResult:
    best_checkpoint_epoch: int
    final_auroc: Optional[float]
    trace: List[MetricsRecord]
    best_params: enc.EncoderParams
    best_prototypes: proto.PrototypeSet
    final_params: enc.EncoderParams
    final_prototypes: proto.PrototypeSet

    def __post_init__(self):
        if self.best_checkpoint_epoch not in {m.epoch for m in self.trace}:
            raise ValidationError("best epoch must appear in the trace")


def clustering_pool(dataset: Dataset) -> np.ndarray:
    """Row indices eligible for prototype fitting: everything not labeled anomalous."""
    return np.flatnonzero(dataset.semi != LABELED_ANOMALY)


def prototype_inputs(params: enc.EncoderParams, dataset: Dataset,
                     shifts: Optional[ShiftFamily]) -> np.ndarray:
    """Embeddings the prototypes are fit on.

    With a shift family the training set is enlarged by every shifting
    transform, so the clustering pool covers the shifted copies too (they
    are meant to claim prototypes of their own).
    """
    feats = dataset.features[clustering_pool(dataset)]
    if shifts is not None and shifts.count > 1:
        feats = shifts.expand(feats)[0]
    return enc.embed(params, feats)


def _sub_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def finetune_loop(
    params: enc.EncoderParams,
    protos: proto.PrototypeSet,
    train: Dataset,
    validation: Dataset,
    weak_cfg: WeakAugConfig,
    strong_cfg: StrongAugConfig,
    shifts: Optional[ShiftFamily],
    cfg: FinetuneConfig,
    eval_probe: Optional[Callable[[enc.EncoderParams, proto.PrototypeSet], float]] = None,
) -> RunResult:
    """Energy fine-tuning with labeled anomalies (Step-3 of the pipeline).

    Every batch sample is expanded into two weak views, each view over all
    shifting transforms when shift mode is on; semi-labels repeat across the
    expansion. Prototypes are refit from the current (non-anomalous)
    embeddings every ``refresh_period`` epochs. The early-stop score is
    recorded each epoch and the best-scoring snapshot is returned alongside
    the final state. ``eval_probe``, when given, is only used to log a
    per-epoch test metric; it never influences training or model selection.
    """
    params = params.copy()
    protos = proto.PrototypeSet(protos.vectors.copy(), protos.last_refresh_epoch,
                                list(protos.objective_trace), protos.norm_tol)
    C = obj.c_constant(protos.k, cfg.tau, cfg.c_mode)
    if cfg.shift_mode and (shifts is None or shifts.count < 2):
        raise ValidationError("shift mode requires a shift family with >= 2 transforms")

    rng = _sub_rng(cfg.seed, 1)
    m_state = params.zeros_like()
    v_state = params.zeros_like()
    beta1, beta2 = cfg.adam_betas
    step = 0

    trace: List[MetricsRecord] = []
    t0 = time.time()

    def record(epoch: int, loss_dict: Dict[str, float], refreshed: bool):
        es = earlystop_score(params, protos, validation, weak_cfg, strong_cfg,
                             shifts, _sub_rng(cfg.seed, 2, epoch))
        ta = eval_probe(params, protos) if eval_probe is not None else None
        trace.append(MetricsRecord(epoch=epoch, loss=loss_dict,
                                   earlystop_auroc=es, test_auroc=ta,
                                   prototype_refresh_flag=refreshed,
                                   wallclock=time.time() - t0))

    record(0, obj.LossBreakdown(float("nan"), float("nan"), float("nan")).as_dict(),
           refreshed=False)
    best_epoch = 0
    best_score = trace[0].earlystop_auroc
    best_params = params.copy()
    best_protos = protos

    for epoch in range(1, cfg.epochs + 1):
        refreshed = False
        if cfg.refresh_period is not None:
            emb = prototype_inputs(params, train, shifts if cfg.shift_mode else None)
            new_protos = proto.refresh(protos, emb, epoch, cfg.refresh_period,
                                       seed=cfg.seed, cold_start=cfg.refresh_cold)
            refreshed = new_protos is not protos
            protos = new_protos

        order = rng.permutation(len(train))
        epoch_losses: List[obj.LossBreakdown] = []
        for start in range(0, len(order), cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            X = train.features[take]
            semi = train.semi[take]

            views = []
            ids_parts = []
            for _ in range(2):
                v = weak_batch(X, weak_cfg, rng)
                if cfg.shift_mode:
                    rows, ids = shifts.expand(v)
                else:
                    rows, ids = v, np.zeros(len(v), dtype=np.int64)
                views.append(rows)
                ids_parts.append(ids)
            all_rows = np.vstack(views)
            shift_ids = np.concatenate(ids_parts)
            reps = len(all_rows) // len(X)
            semi_rep = np.tile(semi, reps)

            cache = enc.forward(params, all_rows)
            scores, ds_de = obj.energy_score_grad(cache.embed, protos.vectors, cfg.tau)
            breakdown, d_scores = obj.loss_by_name(cfg.loss_name, scores, semi_rep,
                                                   C, strict=cfg.strict_scores)
            d_embed = d_scores[:, None] * ds_de
            d_logits = None
            if cfg.shift_mode:
                logits = enc.head_logits(params, cache)
                ce, d_logits = obj.loss_shift(logits, shift_ids)
                d_logits = cfg.shift_loss_weight * d_logits
                breakdown.shift_term = cfg.shift_loss_weight * ce
                breakdown.total += breakdown.shift_term
            grads = enc.backward(params, cache, d_embed=d_embed, d_logits=d_logits)

            step += 1
            bc1 = 1.0 - beta1 ** step
            bc2 = 1.0 - beta2 ** step
            for f in params.FIELDS:
                g = getattr(grads, f)
                m = getattr(m_state, f)
                v = getattr(v_state, f)
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                getattr(params, f).__isub__(
                    cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps))
            epoch_losses.append(breakdown)

        mean_loss = {
            key: float(np.mean([b.as_dict()[key] for b in epoch_losses]))
            for key in ("total", "anomaly_term", "normal_term", "shift_term")
        } if epoch_losses else obj.LossBreakdown(0.0, 0.0, 0.0).as_dict()
        record(epoch, mean_loss, refreshed)
        if trace[-1].earlystop_auroc > best_score:
            best_score = trace[-1].earlystop_auroc
            best_epoch = epoch
            best_params = params.copy()
            best_protos = proto.PrototypeSet(protos.vectors.copy(),
                                             protos.last_refresh_epoch,
                                             list(protos.objective_trace),
                                             protos.norm_tol)

    return RunResult(
        best_checkpoint_epoch=best_epoch,
        final_auroc=None,
        trace=trace,
        best_params=best_params,
        best_prototypes=best_protos,
        final_params=params,
        final_prototypes=protos,
    )


# --------------------------------------------------------------------------
# Test-time scoring
# --------------------------------------------------------------------------

def evaluate_scores(
    score_name: str,
    params: enc.EncoderParams,
    protos: proto.PrototypeSet,
    test: Dataset,
    reference: Optional[np.ndarray],
    weak_cfg: WeakAugConfig,
    shifts: Optional[ShiftFamily],
    tau: float,
    n_ensemble: int,
    rng: np.random.Generator,
    ensemble_mode: str = "scores",
) -> np.ndarray:
    """Per-sample normality scores on a test set under one scoring rule."""
    if score_name == "energy":
        return obj.score_ensemble(test.features, params, protos.vectors, tau,
                                  weak_cfg, shifts, n_ensemble, rng,
                                  mode=ensemble_mode)
    emb = enc.embed(params, test.features)
    if score_name == "cosine":
        return obj.score_cosine(emb, protos.vectors)
    if score_name == "uniformity":
        if reference is None or len(reference) == 0:
            raise ValidationError("uniformity scoring needs reference embeddings")
        return obj.score_uniformity(emb, reference)
    raise ValidationError(f"unknown score {score_name!r}; expected one of {obj.SCORES}")


def test_auroc_probe(test: Dataset, tau: float
                     ) -> Callable[[enc.EncoderParams, proto.PrototypeSet], float]:
    """Per-epoch test metric: clean-embedding energy AUROC. Logging only."""
    labels = test.eval_normal_labels()

    def probe(params: enc.EncoderParams, protos: proto.PrototypeSet) -> float:
        emb = enc.embed(params, test.features)
        return auroc(obj.energy_score(emb, protos.vectors, tau), labels)

    return probe


def split_hash(*datasets: Dataset) -> str:
    """Stable digest of the ids and semi-labels of a collection of splits."""
    h = hashlib.sha256()
    for ds in datasets:
        h.update(np.ascontiguousarray(ds.ids).tobytes())
        h.update(np.ascontiguousarray(ds.semi).tobytes())
    return h.hexdigest()
