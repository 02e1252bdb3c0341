"""Connection strengths, per-task normalization, and channel groups.

A conv kernel's strength toward an output channel is its mean squared
weight; coupling with the task-specific batch-norm scale gives a per-task,
per-channel score. Normalizing each task's scores across the layer's
output channels makes them comparable between tasks; the argmax per
channel assigns the channel to its top-priority task's group.

Everything here is a pure function over immutable snapshots; safe to
evaluate concurrently across layers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np

from .autodiff import BN_EPS, BatchNormState, Tensor
from .errors import ShapeError, StateError


def kernel_strength(weight: Tensor | np.ndarray, p: int, q: int) -> float:
    """Mean squared kernel weight between output channel p and input channel q."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    c_out, c_in, k, _ = w.shape
    if not (0 <= p < c_out and 0 <= q < c_in):
        raise ShapeError(f"kernel_strength: channel ({p}, {q}) out of range ({c_out}, {c_in})")
    return float((w[p, q] ** 2).sum() / (k * k))


def channel_strength(weight: Tensor | np.ndarray, bn_state: BatchNormState,
                     p: int, eps: float = BN_EPS) -> float:
    """Strength of output channel p for one task: the squared batch-norm scale
    over (running variance + eps), times the channel's summed kernel strength."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    c_out, c_in = w.shape[0], w.shape[1]
    if not 0 <= p < c_out:
        raise ShapeError(f"channel_strength: channel {p} out of range ({c_out})")
    var = float(bn_state.running_var[p])
    if var < 0:
        raise StateError(f"channel_strength: negative running variance at channel {p}")
    gamma = float(bn_state.gamma.data[p])
    kernel_sum = sum(kernel_strength(w, p, q) for q in range(c_in))
    return gamma ** 2 / (var + eps) * kernel_sum


def _channel_strength_rows(weight: np.ndarray, bn_states: Mapping[int, BatchNormState],
                           task_ids: tuple[int, ...], eps: float) -> np.ndarray:
    kernel_sums = (weight ** 2).sum(axis=(1, 2, 3)) / (weight.shape[2] * weight.shape[3])
    rows = np.empty((len(task_ids), weight.shape[0]))
    for r, tid in enumerate(task_ids):
        st = bn_states[tid]
        if np.any(st.running_var < 0):
            raise StateError(f"task {tid}: negative running variance")
        rows[r] = st.gamma.data ** 2 / (st.running_var + eps) * kernel_sums
    return rows


def normalized_strength(raw: np.ndarray) -> np.ndarray:
    """Normalize each task's row to sum to 1; an all-zero row becomes uniform."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ShapeError("normalized_strength: raw strengths must be nonnegative")
    sums = raw.sum(axis=1, keepdims=True)
    out = np.empty_like(raw)
    n = raw.shape[1]
    for r in range(raw.shape[0]):
        out[r] = raw[r] / sums[r] if sums[r] > 0 else 1.0 / n
    return out


def build_channel_groups(norm: np.ndarray, task_ids: tuple[int, ...]) -> dict[int, tuple[int, ...]]:
    """Assign each channel to the task with the largest normalized strength;
    exact ties go to the lowest task index."""
    owners = np.argmax(norm, axis=0)  # argmax returns the first (lowest) maximum
    groups: dict[int, tuple[int, ...]] = {tid: () for tid in task_ids}
    for tid_row, tid in enumerate(task_ids):
        groups[tid] = tuple(int(p) for p in np.flatnonzero(owners == tid_row))
    return groups


@dataclass
class StrengthReport:
    """Per-layer strength tables and the derived channel groups."""

    layer: str
    task_ids: tuple[int, ...]
    raw: np.ndarray   # (K, C) per-task raw strengths
    norm: np.ndarray  # (K, C) per-task normalized strengths
    groups: dict[int, tuple[int, ...]]

    @property
    def num_channels(self) -> int:
        return self.raw.shape[1]

    def validate(self) -> None:
        if not np.allclose(self.norm.sum(axis=1), 1.0, atol=1e-9):
            raise StateError(f"{self.layer}: normalized rows do not sum to 1")
        members = sorted(p for chans in self.groups.values() for p in chans)
        if members != list(range(self.num_channels)):
            raise StateError(f"{self.layer}: channel groups do not partition the channels")
        for tid, chans in self.groups.items():
            row = self.task_ids.index(tid)
            for p in chans:
                if np.any(self.norm[:, p] > self.norm[row, p]):
                    raise StateError(f"{self.layer}: channel {p} not owned by its argmax task")

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "tasks": list(self.task_ids),
            "norm": {str(tid): [float(v) for v in self.norm[r]]
                     for r, tid in enumerate(self.task_ids)},
            "groups": {str(tid): list(chans) for tid, chans in self.groups.items()},
        }


def layer_strength_report(layer_name: str, weight: Tensor | np.ndarray,
                          bn_states: Mapping[int, BatchNormState],
                          task_ids: tuple[int, ...],
                          eps: float = BN_EPS) -> StrengthReport:
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    raw = _channel_strength_rows(w, bn_states, task_ids, eps)
    norm = normalized_strength(raw)
    report = StrengthReport(layer_name, task_ids, raw, norm,
                            build_channel_groups(norm, task_ids))
    report.validate()
    return report


def model_strength_snapshot(model, eps: float = BN_EPS) -> dict[str, StrengthReport]:
    """Strength reports for every trunk layer that carries task batch norm."""
    task_ids = model.spec.task_ids
    snapshot: dict[str, StrengthReport] = {}
    for i, layer in enumerate(model.trunk):
        if layer.bn:
            name = f"trunk.{i}"
            snapshot[name] = layer_strength_report(name, layer.weight, layer.bn, task_ids, eps)
    return snapshot


def write_snapshot_records(stream: IO[str], epoch: int, seed: int,
                           snapshot: Mapping[str, StrengthReport]) -> None:
    """Append one JSON line per (epoch, layer); the data behind priority-share plots."""
    for name in snapshot:
        record = {"seed": seed, "epoch": epoch}
        record.update(snapshot[name].to_record())
        stream.write(json.dumps(record, sort_keys=True) + "\n")
