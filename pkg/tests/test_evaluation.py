import numpy as np
import pytest

from mtlopt.errors import ConfigError
from mtlopt.evaluation import (
    MetricSpec,
    TaskMetricSpec,
    delta_m,
    loss_trend_correlation,
    priority_share,
)
from mtlopt.strength import StrengthReport


def spec(entries):
    return MetricSpec({tid: TaskMetricSpec(n, lower, base)
                       for tid, (n, lower, base) in entries.items()})


def test_delta_m_self_comparison():
    s = spec({1: ("loss", True, 1.5), 2: ("acc", False, 80.0)})
    assert delta_m({1: 1.5, 2: 80.0}, s) == 0.0


def test_delta_m_lower_better_improvement():
    s = spec({1: ("rmse", True, 1.0)})
    assert delta_m({1: 0.9}, s) == pytest.approx(0.10)


def test_delta_m_two_metric_cancellation():
    s = spec({1: ("acc", False, 50.0), 2: ("err", True, 2.0)})
    assert delta_m({1: 55.0, 2: 2.2}, s) == pytest.approx(0.0)


def test_delta_m_zero_baseline_rejected():
    with pytest.raises(ConfigError):
        delta_m({1: 0.5}, spec({1: ("loss", True, 0.0)}))


def test_delta_m_monotonicity_randomized():
    rng = np.random.default_rng(5)
    for _ in range(100):
        baselines = rng.uniform(0.5, 3.0, size=3)
        lower = rng.integers(0, 2, size=3).astype(bool)
        s = spec({i + 1: (f"m{i}", bool(lower[i]), float(baselines[i])) for i in range(3)})
        values = {i + 1: float(rng.uniform(0.5, 3.0)) for i in range(3)}
        base = delta_m(values, s)
        tid = int(rng.integers(1, 4))
        better = dict(values)
        step = float(rng.uniform(0.01, 0.2))
        better[tid] = better[tid] - step if lower[tid - 1] else better[tid] + step
        assert delta_m(better, s) > base


def test_correlation_identical_curves():
    curves = {1: [3.0, 2.0, 1.5, 1.2], 2: [3.0, 2.0, 1.5, 1.2]}
    np.testing.assert_allclose(loss_trend_correlation(curves), np.ones((2, 2)))


def test_correlation_anti_trend():
    curves = {1: [0.0, 1.0, 3.0, 6.0], 2: [6.0, 5.0, 3.0, 0.0]}
    m = loss_trend_correlation(curves)
    assert m[0, 1] == pytest.approx(-1.0)


def test_correlation_hand_case():
    # deltas (1,2,3) vs (2,4,6) are perfectly correlated
    curves = {1: [0.0, 1.0, 3.0, 6.0], 2: [0.0, 2.0, 6.0, 12.0]}
    assert loss_trend_correlation(curves)[0, 1] == pytest.approx(1.0)


def test_correlation_zero_variance_pair():
    curves = {1: [1.0, 2.0, 3.0, 4.0], 2: [5.0, 5.0, 5.0, 5.0]}
    m = loss_trend_correlation(curves)
    assert m[0, 1] == 0.0 and m[1, 1] == 1.0


def test_correlation_matrix_properties():
    rng = np.random.default_rng(8)
    curves = {tid: rng.normal(size=30).cumsum() for tid in (1, 2, 3, 4)}
    m = loss_trend_correlation(curves)
    np.testing.assert_allclose(m, m.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(m), 1.0)
    assert np.linalg.eigvalsh(m).min() > -1e-10


def test_correlation_needs_three_epochs():
    with pytest.raises(ConfigError):
        loss_trend_correlation({1: [1.0, 2.0], 2: [2.0, 1.0]})


def _report(groups, channels):
    k = len(groups)
    norm = np.zeros((k, channels))
    for row, (tid, chans) in enumerate(sorted(groups.items())):
        for c in chans:
            norm[row, c] = 1.0
    # fill non-owned entries with small values, renormalize rows
    norm = norm + 0.01
    norm /= norm.sum(axis=1, keepdims=True)
    return StrengthReport("layer", tuple(sorted(groups)), norm.copy(), norm, groups)


def test_priority_share_counts():
    report = _report({1: (0, 1, 2), 2: (3,)}, channels=4)
    assert priority_share(report) == {1: 0.75, 2: 0.25}


def test_priority_share_single_task():
    report = _report({1: (0, 1)}, channels=2)
    assert priority_share(report) == {1: 1.0}


def test_priority_share_sums_to_one():
    rng = np.random.default_rng(4)
    for _ in range(50):
        channels = int(rng.integers(1, 12))
        owners = rng.integers(1, 4, size=channels)
        groups = {tid: tuple(int(c) for c in np.flatnonzero(owners == tid))
                  for tid in (1, 2, 3)}
        shares = priority_share(_report(groups, channels))
        assert abs(sum(shares.values()) - 1.0) < 1e-12
