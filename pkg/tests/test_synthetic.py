import math

import numpy as np
import pytest

from mtlopt.errors import ConfigError
from mtlopt.synthetic import DEPTH_TASK, SEG_TASK, SyntheticConfig, SyntheticMtlDataset


def test_batch_shapes_match_config():
    cfg = SyntheticConfig(batch_size=3, channels=2, height=7, width=9, num_classes=5)
    batch = SyntheticMtlDataset(cfg, seed=0).batch(0)
    assert batch.x.shape == (3, 2, 7, 9)
    assert batch.targets[SEG_TASK].shape == (3, 7, 9)
    assert batch.targets[DEPTH_TASK].shape == (3, 1, 7, 9)
    assert batch.targets[SEG_TASK].dtype == np.int64
    assert set(np.unique(batch.targets[SEG_TASK])) <= set(range(5))


def test_determinism_bit_identical():
    cfg = SyntheticConfig()
    a = SyntheticMtlDataset(cfg, seed=42)
    b = SyntheticMtlDataset(cfg, seed=42)
    for idx in (0, 3):
        ba, bb = a.batch(idx), b.batch(idx)
        assert np.array_equal(ba.x, bb.x)
        assert np.array_equal(ba.targets[SEG_TASK], bb.targets[SEG_TASK])
        assert np.array_equal(ba.targets[DEPTH_TASK], bb.targets[DEPTH_TASK])


def test_different_seeds_differ():
    cfg = SyntheticConfig()
    a = SyntheticMtlDataset(cfg, seed=1).batch(0)
    b = SyntheticMtlDataset(cfg, seed=2).batch(0)
    assert not np.array_equal(a.x, b.x)


def test_train_and_eval_streams_are_distinct():
    ds = SyntheticMtlDataset(SyntheticConfig(), seed=3)
    assert not np.array_equal(ds.batch(0).x, ds.eval_batch(0).x)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        SyntheticMtlDataset(SyntheticConfig(num_classes=1), seed=0)
    with pytest.raises(ConfigError):
        SyntheticMtlDataset(SyntheticConfig(batch_size=0), seed=0)


def test_balanced_classes_constant_predictor_entropy():
    # over 1e4 samples the class histogram is balanced, so the best constant
    # predictor's cross-entropy approaches ln(num_classes) within 2%
    cfg = SyntheticConfig(batch_size=8, height=12, width=12, num_classes=4)
    ds = SyntheticMtlDataset(cfg, seed=7)
    counts = np.zeros(cfg.num_classes)
    samples = 0
    idx = 0
    while samples < 10_000:
        seg = ds.batch(idx).targets[SEG_TASK]
        counts += np.bincount(seg.reshape(-1), minlength=cfg.num_classes)
        samples += seg.shape[0]
        idx += 1
    freqs = counts / counts.sum()
    constant_predictor_ce = -float(np.sum(freqs * np.log(freqs)))
    assert abs(constant_predictor_ce - math.log(cfg.num_classes)) < 0.02 * math.log(cfg.num_classes)


def test_depth_target_bounded():
    batch = SyntheticMtlDataset(SyntheticConfig(), seed=5).batch(0)
    assert np.all(np.abs(batch.targets[DEPTH_TASK]) <= 1.0)
