import numpy as np
import pytest

from protoad.augment import (ShiftFamily, StrongAugConfig, WeakAugConfig,
                             strong, strong_batch, weak, weak_batch)
from protoad.data import ValidationError


# ------------------------------------------------------------------- weak

def test_weak_identity_configuration():
    x = np.array([1.0, -2.0, 3.0, 0.5])
    cfg = WeakAugConfig.identity()
    out = weak(x, cfg, np.random.default_rng(0))
    assert np.array_equal(out, x)


def test_weak_deterministic_under_seed():
    x = np.linspace(-1, 1, 32)
    cfg = WeakAugConfig()
    a = weak(x, cfg, np.random.default_rng(7))
    b = weak(x, cfg, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_weak_masks_exactly_floor_fraction():
    # floor(0.1 * 32) = 3 zeroed coordinates per draw
    rng = np.random.default_rng(0)
    data = rng.normal(size=(1000, 32)) + 5.0  # bounded away from zero
    out = weak_batch(data, WeakAugConfig(), np.random.default_rng(1))
    zeros = (out == 0.0).sum(axis=1)
    assert np.all(zeros == 3)


def test_weak_config_validation():
    with pytest.raises(ValidationError):
        WeakAugConfig(mask_fraction=0.5)
    with pytest.raises(ValidationError):
        WeakAugConfig(scale_jitter=(0.0, 1.0))


def test_weak_output_finite():
    rng = np.random.default_rng(3)
    out = weak_batch(rng.normal(size=(100, 16)), WeakAugConfig(),
                     np.random.default_rng(4))
    assert np.all(np.isfinite(out))


# ------------------------------------------------------------------ shift

def test_shift_slot_zero_is_identity():
    fam = ShiftFamily.random(dim=8, count=4, seed=0)
    x = np.arange(8.0)
    assert np.array_equal(fam.apply(x, 0), x)


def test_shift_preserves_norm():
    fam = ShiftFamily.random(dim=16, count=4, seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=16)
    for k in range(fam.count):
        assert abs(np.linalg.norm(fam.apply(x, k)) - np.linalg.norm(x)) < 1e-9


def test_shift_orthogonality_tolerance():
    fam = ShiftFamily.random(dim=32, count=6, seed=3)
    for q in fam.matrices:
        assert np.max(np.abs(q.T @ q - np.eye(32))) < 1e-9


def test_shift_planar_rotation_fixture():
    rot90 = np.array([[0.0, -1.0], [1.0, 0.0]])
    fam = ShiftFamily([np.eye(2), rot90])
    assert np.allclose(fam.apply(np.array([1.0, 0.0]), 1), [0.0, 1.0])


def test_shift_index_out_of_range():
    fam = ShiftFamily.random(dim=4, count=4, seed=0)
    with pytest.raises(ValidationError):
        fam.apply(np.zeros(4), 4)


def test_shift_family_rejects_non_identity_first():
    rot90 = np.array([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(ValidationError):
        ShiftFamily([rot90, np.eye(2)])


def test_shifts_mutually_distinguishable():
    fam = ShiftFamily.random(dim=16, count=4, seed=5)
    rng = np.random.default_rng(6)
    x = rng.normal(size=16)
    x /= np.linalg.norm(x)
    outs = [fam.apply(x, k) for k in range(fam.count)]
    for i in range(fam.count):
        for j in range(i + 1, fam.count):
            assert np.linalg.norm(outs[i] - outs[j]) > 1e-6


def test_shift_expand_layout():
    fam = ShiftFamily.random(dim=8, count=3, seed=0)
    X = np.random.default_rng(0).normal(size=(5, 8))
    rows, ids = fam.expand(X)
    assert rows.shape == (15, 8)
    assert np.array_equal(ids, np.repeat([0, 1, 2], 5))
    assert np.array_equal(rows[:5], X)


# ----------------------------------------------------------------- strong

def test_strong_zero_probability_is_identity():
    cfg = StrongAugConfig(apply_probability=0.0)
    x = np.linspace(-2, 2, 16)
    assert np.array_equal(strong(x, cfg, np.random.default_rng(0)), x)


def test_strong_deterministic_under_seed():
    cfg = StrongAugConfig()
    x = np.linspace(-2, 2, 16)
    a = strong(x, cfg, np.random.default_rng(3))
    b = strong(x, cfg, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_strong_dominates_weak_displacement():
    # Monte-Carlo estimate over 1000 samples: mean displacement ratio >= 4.
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 32))
    weak_cfg = WeakAugConfig()
    strong_cfg = StrongAugConfig.for_weak(weak_cfg)
    wd = np.linalg.norm(weak_batch(X, weak_cfg, np.random.default_rng(1)) - X,
                        axis=1).mean()
    sd = np.linalg.norm(strong_batch(X, strong_cfg, np.random.default_rng(2)) - X,
                        axis=1).mean()
    assert sd / wd >= 4.0


def test_strong_noise_dominance_enforced():
    weak_cfg = WeakAugConfig(noise_sigma=0.1)
    with pytest.raises(ValidationError):
        StrongAugConfig(noise_sigma=0.2).validate_against(weak_cfg)
    StrongAugConfig(noise_sigma=0.4).validate_against(weak_cfg)


def test_strong_output_finite():
    rng = np.random.default_rng(9)
    out = strong_batch(rng.normal(size=(200, 16)), StrongAugConfig(),
                       np.random.default_rng(10))
    assert np.all(np.isfinite(out))
