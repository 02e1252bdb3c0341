"""Multi-task performance metric, loss-trend correlation, priority shares."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .strength import StrengthReport


@dataclass(frozen=True)
class TaskMetricSpec:
    name: str
    lower_is_better: bool
    baseline: float


@dataclass(frozen=True)
class MetricSpec:
    """Per-task metric directions and single-task baseline values."""

    per_task: Mapping[int, TaskMetricSpec]

    def validate(self) -> None:
        for tid, m in self.per_task.items():
            if not np.isfinite(m.baseline):
                raise ConfigError(f"task {tid}: baseline must be finite")
            if m.baseline == 0.0:
                raise ConfigError(f"task {tid}: baseline of 0 makes the ratio undefined")


def delta_m(model_metrics: Mapping[int, float], spec: MetricSpec) -> float:
    """Mean signed relative improvement over the single-task baselines.

    Positive values mean the multi-task model beats the baselines on
    average; a lower-is-better metric contributes (baseline - value) /
    baseline, a higher-is-better one (value - baseline) / baseline.
    """
    spec.validate()
    if set(model_metrics) != set(spec.per_task):
        raise ConfigError(
            f"metrics cover tasks {sorted(model_metrics)}, spec covers {sorted(spec.per_task)}")
    total = 0.0
    for tid, m in spec.per_task.items():
        sign = -1.0 if m.lower_is_better else 1.0
        total += sign * (model_metrics[tid] - m.baseline) / m.baseline
    return total / len(spec.per_task)


def loss_trend_correlation(curves: Mapping[int, Sequence[float]]) -> np.ndarray:
    """Pearson correlation of per-epoch loss deltas for every task pair.

    Rows/columns follow ascending task id. The diagonal is 1; a pair with a
    zero-variance delta series gets correlation 0.
    """
    task_ids = sorted(curves)
    series = [np.asarray(curves[tid], dtype=np.float64) for tid in task_ids]
    if any(len(s) < 3 for s in series):
        raise ConfigError("loss_trend_correlation needs >= 3 epochs per task")
    if len({len(s) for s in series}) != 1:
        raise ConfigError("loss curves must have equal length")
    deltas = [np.diff(s) for s in series]
    k = len(task_ids)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            di = deltas[i] - deltas[i].mean()
            dj = deltas[j] - deltas[j].mean()
            denom = np.sqrt((di * di).sum() * (dj * dj).sum())
            out[i, j] = out[j, i] = float((di * dj).sum() / denom) if denom > 0 else 0.0
    return out


def priority_share(report: StrengthReport) -> dict[int, float]:
    """Fraction of the layer's output channels owned by each task."""
    report.validate()
    n = report.num_channels
    return {tid: len(chans) / n for tid, chans in report.groups.items()}
