import math

import numpy as np
import pytest

from protoad import encoder as enc
from protoad.augment import ShiftFamily, WeakAugConfig
from protoad.data import (LABELED_ANOMALY, Dataset, ScenarioConfig,
                          SyntheticSpec, ValidationError, build_scenario,
                          generate)
from protoad.mathcore import grad_check, l2_normalize
from protoad.pretrain import (ContrastiveBatch, PretrainConfig,
                              contrastive_loss, decompose_loss, pretrain_loop)

LN_E2_PLUS_2 = 2.2395447662218845  # log(e^2 + 2), 40-digit evaluation


def _orthogonal_fixture():
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    return ContrastiveBatch(view1=np.stack([u, v]), view2=np.stack([u, v]),
                            tau=0.5)


def _random_batch(m, z, tau, seed):
    rng = np.random.default_rng(seed)
    v1 = rng.normal(size=(m, z))
    v2 = rng.normal(size=(m, z))
    v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
    v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
    return ContrastiveBatch(view1=v1, view2=v2, tau=tau)


def test_contrastive_orthogonal_fixture():
    # every anchor contributes -ln(e^2 / (e^2 + 2))
    loss, _, _ = contrastive_loss(_orthogonal_fixture())
    assert loss == pytest.approx(LN_E2_PLUS_2 - 2.0, abs=1e-12)


def test_contrastive_identical_embeddings():
    m = 4
    e = l2_normalize(np.ones(3))
    batch = ContrastiveBatch(np.tile(e, (m, 1)), np.tile(e, (m, 1)), tau=0.5)
    loss, _, _ = contrastive_loss(batch)
    assert loss == pytest.approx(math.log(2 * m - 1), abs=1e-12)


def test_contrastive_needs_two_samples():
    with pytest.raises(ValidationError):
        ContrastiveBatch(np.ones((1, 3)), np.ones((1, 3)), tau=0.5)


def test_contrastive_grad():
    batch = _random_batch(4, 5, 0.5, seed=0)
    m, z = batch.view1.shape

    def f(flat):
        views = flat.reshape(2 * m, z)
        b = ContrastiveBatch(views[:m], views[m:], batch.tau)
        loss, g1, g2 = contrastive_loss(b)
        return loss, np.vstack([g1, g2]).ravel()

    point = np.vstack([batch.view1, batch.view2]).ravel()
    report = grad_check(f, point, h=1e-5)
    assert report.max_rel_error < 1e-5


def test_decompose_identity_on_random_batches():
    for seed in range(30):
        batch = _random_batch(int(3 + seed % 6), 6, 0.5, seed)
        loss, _, _ = contrastive_loss(batch)
        align, uniform = decompose_loss(batch)
        assert abs(loss - (align + uniform)) < 1e-12


def test_decompose_orthogonal_fixture_values():
    align, uniform = decompose_loss(_orthogonal_fixture())
    assert align == pytest.approx(-2.0, abs=1e-12)
    assert uniform == pytest.approx(LN_E2_PLUS_2, abs=1e-12)


def test_decompose_flat_fixture():
    m = 4
    e = l2_normalize(np.ones(3))
    batch = ContrastiveBatch(np.tile(e, (m, 1)), np.tile(e, (m, 1)), tau=0.5)
    align, uniform = decompose_loss(batch)
    assert align + uniform == pytest.approx(math.log(2 * m - 1), abs=1e-12)
    assert align == pytest.approx(-2.0, abs=1e-12)


# ------------------------------------------------------------------ loop

def _train_split(seed=0, samples=120, anomaly_classes=2):
    pool = generate(SyntheticSpec(input_dim=8, normal_subclusters=2,
                                  anomaly_classes=anomaly_classes,
                                  samples_per_class=samples, seed=seed))
    return build_scenario(pool, ScenarioConfig(scenario="s1", gamma_l=0.1,
                                               seed=seed))


def _dims(shifts=1):
    return enc.EncoderDims(input=8, hidden=32, embed=8, shifts=shifts)


def test_pretrain_zero_epochs_leaves_encoder_unchanged():
    split = _train_split()
    params = enc.init(0, _dims())
    cfg = PretrainConfig(epochs=0, batch_size=32, seed=0)
    result = pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)
    assert np.array_equal(result.params.to_vector(), params.to_vector())
    assert len(result.metrics) == 1


def test_pretrain_probe_loss_trend():
    # Trend oracle at the synthetic-default scale: fixed probe batch loss
    # falls from start to finish with at most 20% non-monotone epochs.
    pool = generate(SyntheticSpec(seed=0))
    split = build_scenario(pool, ScenarioConfig(scenario="s1", gamma_l=0.1,
                                                seed=0))
    params = enc.init(1, enc.EncoderDims(input=32, hidden=64, embed=16, shifts=1))
    cfg = PretrainConfig(epochs=25, batch_size=128, seed=1)
    result = pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)
    probe = [m.probe_loss for m in result.metrics]
    assert probe[-1] < probe[0]
    increases = sum(1 for a, b in zip(probe, probe[1:]) if b > a)
    assert increases <= 0.2 * (len(probe) - 1)


def test_pretrain_never_touches_labeled_anomalies():
    split = _train_split()
    anomaly_ids = set(split.train.ids[split.train.semi == LABELED_ANOMALY].tolist())
    assert anomaly_ids
    params = enc.init(2, _dims())
    cfg = PretrainConfig(epochs=2, batch_size=32, seed=2)
    result = pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)
    assert not (set(result.used_ids.tolist()) & anomaly_ids)


def test_pretrain_deterministic():
    split = _train_split()
    cfg = PretrainConfig(epochs=3, batch_size=32, seed=5)
    runs = [pretrain_loop(split.train, enc.init(3, _dims()), WeakAugConfig(),
                          None, cfg) for _ in range(2)]
    assert np.array_equal(runs[0].params.to_vector(), runs[1].params.to_vector())
    losses = [[m.loss for m in r.metrics[1:]] for r in runs]  # epoch 0 is NaN
    assert losses[0] == losses[1]
    probes = [[m.probe_loss for m in r.metrics] for r in runs]
    assert probes[0] == probes[1]


def test_pretrain_shift_mode_head_learns():
    split = _train_split(samples=150)
    shifts = ShiftFamily.random(8, count=4, seed=0)
    params = enc.init(4, _dims(shifts=4))
    cfg = PretrainConfig(epochs=20, batch_size=32, seed=4, shift_mode=True)
    result = pretrain_loop(split.train, params, WeakAugConfig(), shifts, cfg)
    # held-out data: the validation split, expanded over all shifts
    rows, ids = shifts.expand(split.validation.features)
    logits = enc.shift_logits(result.params, rows)
    acc = float(np.mean(np.argmax(logits, axis=1) == ids))
    assert acc > 1.0 / shifts.count + 0.2


def test_pretrain_shift_mode_requires_family():
    split = _train_split()
    params = enc.init(5, _dims(shifts=4))
    cfg = PretrainConfig(epochs=1, batch_size=32, shift_mode=True)
    with pytest.raises(ValidationError):
        pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)


def test_pretrain_training_energy_rises():
    # The pathology the fine-tuning stage exists to fix: contrastive
    # pre-training drives the training samples' own energy up (equivalently,
    # their uniformity-based normality score down).
    split = _train_split(samples=200)
    params = enc.init(6, _dims())
    cfg = PretrainConfig(epochs=25, batch_size=32, seed=6)
    result = pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)
    s_cont = [m.probe_uniformity_mean for m in result.metrics]
    energy = [-s for s in s_cont]
    assert energy[-1] > energy[0]


def test_pretrain_debug_identity_runs():
    split = _train_split()
    params = enc.init(7, _dims())
    cfg = PretrainConfig(epochs=1, batch_size=32, seed=7, debug_identity=True)
    pretrain_loop(split.train, params, WeakAugConfig(), None, cfg)
