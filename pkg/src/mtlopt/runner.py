"""Configuration-driven experiment runner.

One run trains the configured method for every seed, records per-epoch
metrics, the phase/projection run log, and per-layer strength snapshots,
and writes them as plot-ready files. Every byte of the metrics and log
files is determined by (config, seed); wall-clock timestamps appear only
in the summary.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, MtloptError
from .evaluation import MetricSpec, TaskMetricSpec, delta_m, priority_share
from .loss_scaling import DwaState, UncertaintyState, dwa_weights, static_weights
from .network import Batch, Model, build_model, per_task_gradients, save_checkpoint
from .optimizers import (
    METHOD_OURS,
    PHASE1,
    MtlOptimizer,
    OptimizerConfig,
    PhaseSchedule,
)
from .rng import substream
from .strength import model_strength_snapshot
from .synthetic import SyntheticMtlDataset
from .autodiff import Tape

METRICS_FILE = "metrics.csv"
RUN_LOG_FILE = "run_log.jsonl"
STRENGTH_FILE = "strength.jsonl"
SUMMARY_FILE = "summary.json"
BASELINES_FILE = "baselines.json"


@dataclass
class EpochRow:
    seed: int
    method: str
    epoch: int
    train_loss: dict[int, float]
    eval_loss: dict[int, float]
    metric: dict[int, float]
    weight: dict[int, float]
    share: dict[int, float]
    delta_m: float | None


@dataclass
class SeedResult:
    seed: int
    rows: list[EpochRow] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    strength_rows: list[dict] = field(default_factory=list)
    final_eval: dict[int, float] = field(default_factory=dict)
    final_metric: dict[int, float] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    error: str | None = None
    model: Model | None = field(default=None, repr=False)  # trained model, in-memory only


@dataclass
class RunReport:
    config: dict
    seed_results: list[SeedResult]

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.seed_results)

    @property
    def violations(self) -> list[str]:
        return [v for r in self.seed_results for v in r.violations]

    def mean_final_delta_m(self) -> float | None:
        values = [r.rows[-1].delta_m for r in self.seed_results
                  if r.rows and r.rows[-1].delta_m is not None]
        return float(np.mean(values)) if values else None


# ---------------------------------------------------------------------------
# weighting schemes inside the loop
# ---------------------------------------------------------------------------

class _WeightProvider:
    """Per-epoch / per-step task weights for the configured scheme."""

    def __init__(self, config: ExperimentConfig):
        self.scheme = config.scheme
        self.task_ids = config.model.task_ids
        k = len(self.task_ids)
        if self.scheme == "equal":
            self._static = static_weights("equal", k)
        elif self.scheme == "manual":
            self._static = static_weights("manual", k, config.manual_ratios)
        elif self.scheme == "dwa":
            self.dwa = DwaState(temperature=config.dwa_temperature)
        else:
            kinds = {t.id: ("regression" if t.loss == "mse" else "classification")
                     for t in config.model.tasks}
            self.uncertainty = UncertaintyState.create(kinds)
        self._lr = config.lr

    def epoch_weights(self) -> dict[int, float]:
        if self.scheme in ("equal", "manual"):
            return {tid: float(w) for tid, w in zip(self.task_ids, self._static)}
        if self.scheme == "dwa":
            w = dwa_weights(self.dwa, len(self.task_ids))
            return {tid: float(v) for tid, v in zip(self.task_ids, w)}
        return {tid: self.uncertainty.loss_weight(tid) for tid in self.task_ids}

    def step_weights(self) -> dict[int, float]:
        if self.scheme == "uncertainty":
            return {tid: self.uncertainty.loss_weight(tid) for tid in self.task_ids}
        return self.epoch_weights()

    def after_step(self, raw_losses: Mapping[int, float]) -> None:
        if self.scheme == "uncertainty":
            self.uncertainty.sgd_update(raw_losses, self._lr)

    def after_epoch(self, epoch_mean_losses: Mapping[int, float]) -> None:
        if self.scheme == "dwa":
            self.dwa.update(epoch_mean_losses)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def task_metric_name(loss_kind: str) -> str:
    """Reported per-task metric: pixel accuracy for classification heads
    (higher better), rmse for regression heads (lower better)."""
    return "pixel_accuracy" if loss_kind == "cross_entropy" else "rmse"


def metric_is_lower_better(loss_kind: str) -> bool:
    return loss_kind != "cross_entropy"


def evaluate_model(model: Model, dataset: SyntheticMtlDataset, num_batches: int,
                   target_map: Mapping[int, int] | None = None
                   ) -> tuple[dict[int, float], dict[int, float]]:
    """Held-out (eval-mode) per-task losses and metrics over num_batches."""
    loss_totals = {tid: 0.0 for tid in model.spec.task_ids}
    hits = {tid: 0.0 for tid in model.spec.task_ids}
    counts = {tid: 0 for tid in model.spec.task_ids}
    sq_err = {tid: 0.0 for tid in model.spec.task_ids}
    for idx in range(num_batches):
        batch = _remap(dataset.eval_batch(idx), target_map)
        for tid in model.spec.task_ids:
            tape = Tape()
            pred = model.forward(batch.x, tid, tape, mode="eval")
            kind = model.spec.task(tid).loss
            target = batch.targets[tid]
            loss_totals[tid] += tape.compute_loss(pred, target, kind).item()
            if kind == "cross_entropy":
                predicted = pred.data.argmax(axis=1)
                hits[tid] += float((predicted == target).sum())
                counts[tid] += target.size
            else:
                sq_err[tid] += float(((pred.data - target) ** 2).sum())
                counts[tid] += np.asarray(target).size
    losses = {tid: total / num_batches for tid, total in loss_totals.items()}
    metrics = {}
    for tid in model.spec.task_ids:
        if model.spec.task(tid).loss == "cross_entropy":
            metrics[tid] = hits[tid] / counts[tid]
        else:
            metrics[tid] = float(np.sqrt(sq_err[tid] / counts[tid]))
    return losses, metrics


def _remap(batch: Batch, target_map: Mapping[int, int] | None) -> Batch:
    if not target_map:
        return batch
    return Batch(batch.x, {new: batch.targets[old] for old, new in target_map.items()})


def load_baseline_metric_spec(path: str) -> MetricSpec:
    if not os.path.exists(path):
        raise ConfigError(f"baselines file not found: {path} (run the baseline subcommand)")
    with open(path) as fh:
        data = json.load(fh)
    per_task = {int(tid): TaskMetricSpec(entry["metric"], entry["lower_is_better"],
                                         entry["baseline"])
                for tid, entry in data["tasks"].items()}
    spec = MetricSpec(per_task)
    spec.validate()
    return spec


def mean_pairwise_gradient_cosine(model: Model, batches: list[Batch]) -> float:
    """Mean cosine between task pairs' shared-parameter gradients."""
    task_ids = model.spec.task_ids
    cosines = []
    for batch in batches:
        flats = {}
        for tid in task_ids:
            model.zero_grad()
            _, gs, _ = per_task_gradients(model, batch, tid, loss_weight=1.0)
            flats[tid] = gs.flat(sorted(gs.entries))
        for i, a in enumerate(task_ids):
            for b in task_ids[i + 1:]:
                na, nb = np.linalg.norm(flats[a]), np.linalg.norm(flats[b])
                if na > 0 and nb > 0:
                    cosines.append(float(flats[a] @ flats[b] / (na * nb)))
    model.zero_grad()
    return float(np.mean(cosines)) if cosines else 0.0


# ---------------------------------------------------------------------------
# the run itself
# ---------------------------------------------------------------------------

def _run_seed(config: ExperimentConfig, seed: int,
              metric_spec: MetricSpec | None,
              target_map: Mapping[int, int] | None = None) -> SeedResult:
    result = SeedResult(seed=seed)
    spec = config.model
    task_ids = spec.task_ids
    k = len(task_ids)

    init_seed = int(substream(seed, "init").integers(0, 2 ** 63))
    data_seed = int(substream(seed, "data").integers(0, 2 ** 63))
    model = build_model(spec, seed=init_seed)
    dataset = SyntheticMtlDataset(config.data, seed=data_seed)
    provider = _WeightProvider(config)
    rule = config.update_rule
    optimizer = MtlOptimizer(model, OptimizerConfig(
        method=config.method, lr=config.lr, update_rule=rule["kind"],
        adam_beta1=rule["beta1"], adam_beta2=rule["beta2"], adam_eps=rule["eps"],
        task_order=config.task_order))
    schedule = PhaseSchedule(config.epochs, substream(seed, "phase-draw"))
    pcgrad_rng = substream(seed, "pcgrad-order")

    for epoch in range(config.epochs):
        snapshot = model_strength_snapshot(model)
        for name, report in snapshot.items():
            record = {"seed": seed, "epoch": epoch}
            record.update(report.to_record())
            result.strength_rows.append(record)

        phase = None
        drawn_p = None
        if config.method == METHOD_OURS:
            if config.phase_override is not None:
                phase = config.phase_override
            else:
                draw = schedule.draw(epoch)
                phase, drawn_p = draw.phase, draw.p

        epoch_weights = provider.epoch_weights()
        loss_totals = {tid: 0.0 for tid in task_ids}
        conflicts: dict[str, int] = {}
        projections: dict[str, int] = {}
        for step in range(config.steps_per_epoch):
            batch = _remap(dataset.batch(epoch * config.steps_per_epoch + step), target_map)
            weights = provider.step_weights()
            step_result = optimizer.step(batch, weights, phase=phase,
                                         snapshot=snapshot, rng=pcgrad_rng)
            provider.after_step(step_result.losses)
            for tid, value in step_result.losses.items():
                loss_totals[tid] += value
            for name, n in step_result.conflicts.items():
                conflicts[name] = conflicts.get(name, 0) + n
            for name, n in step_result.projections.items():
                projections[name] = projections.get(name, 0) + n
            _check_step_invariants(result, optimizer, step_result, phase, k, epoch, step)

        epoch_mean = {tid: total / config.steps_per_epoch for tid, total in loss_totals.items()}
        provider.after_epoch(epoch_mean)

        evals, metrics = evaluate_model(model, dataset, config.eval_batches, target_map)
        shares = _mean_priority_shares(snapshot, task_ids)
        dm = delta_m(metrics, metric_spec) if metric_spec is not None else None
        result.rows.append(EpochRow(seed, config.method, epoch, epoch_mean, evals,
                                    metrics, epoch_weights, shares, dm))
        result.log_rows.append({
            "seed": seed, "epoch": epoch, "p": drawn_p, "phase": phase,
            "losses": {str(t): epoch_mean[t] for t in task_ids},
            "weights": {str(t): epoch_weights[t] for t in task_ids},
            "conflicts": conflicts, "projections": projections,
        })

    result.final_eval = result.rows[-1].eval_loss if result.rows else {}
    result.final_metric = result.rows[-1].metric if result.rows else {}
    result.model = model
    if config.save_checkpoints:
        os.makedirs(config.out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(config.out_dir, f"model_seed{seed}.npz"))
    return result


def _mean_priority_shares(snapshot, task_ids) -> dict[int, float]:
    if not snapshot:
        return {tid: 0.0 for tid in task_ids}
    shares = {tid: 0.0 for tid in task_ids}
    for report in snapshot.values():
        for tid, value in priority_share(report).items():
            shares[tid] += value
    return {tid: value / len(snapshot) for tid, value in shares.items()}


def _check_step_invariants(result: SeedResult, optimizer: MtlOptimizer, step_result,
                           phase, k: int, epoch: int, step: int) -> None:
    writes = optimizer.last_step_writes
    shared_expected = k if phase == PHASE1 else 1
    for name in optimizer.partition.shared:
        if writes[name] != shared_expected:
            result.violations.append(
                f"epoch {epoch} step {step}: {name} written {writes[name]}x, "
                f"expected {shared_expected}")
    for tid, params in optimizer.partition.per_task.items():
        for name in params:
            if writes[name] != 1:
                result.violations.append(
                    f"epoch {epoch} step {step}: {name} written {writes[name]}x, expected 1")
    for group in step_result.group_details:
        for tid, g in group.projected.items():
            if float(g @ group.reference) < -1e-12:
                result.violations.append(
                    f"epoch {epoch} step {step}: {group.layer} group {group.owner} "
                    f"task {tid} still conflicts after projection")


def run_experiment(config: ExperimentConfig,
                   target_map: Mapping[int, int] | None = None) -> RunReport:
    """Train every seed; deterministic per (config, seed)."""
    metric_spec = None
    if config.baselines_path:
        metric_spec = load_baseline_metric_spec(config.baselines_path)
        if set(metric_spec.per_task) != set(config.model.task_ids):
            raise ConfigError("baselines file does not cover the configured tasks")

    results = []
    for seed in config.seeds:
        try:
            results.append(_run_seed(config, seed, metric_spec, target_map))
        except MtloptError as exc:
            failed = SeedResult(seed=seed)
            failed.error = f"{type(exc).__name__}: {exc}"
            results.append(failed)
    return RunReport(config.to_dict(), results)


# ---------------------------------------------------------------------------
# single-task baselines
# ---------------------------------------------------------------------------

def single_task_config(config: ExperimentConfig, task_id: int) -> ExperimentConfig:
    """Same trunk and data, one task (remapped to id 1), trained with GD."""
    task = config.model.task(task_id)
    overrides = config.to_dict()
    model = overrides["model"]
    head = model["heads"].get(str(task_id), [])
    overrides["model"] = {
        "trunk": model["trunk"],
        "heads": {"1": head},
        "tasks": [{"id": 1, "loss": task.loss, "weight": 1.0}],
    }
    overrides["method"] = "gd"
    overrides["phase_override"] = None
    overrides["task_order"] = None
    overrides["loss_scaling"] = {"scheme": "equal", "manual_ratios": None,
                                 "dwa_temperature": 2.0}
    overrides["baselines"] = None
    overrides["save_checkpoints"] = False
    return ExperimentConfig.from_dict(overrides)


def run_single_task_baselines(config: ExperimentConfig) -> dict:
    """Train each task alone and collect its final metric per seed."""
    tasks = {}
    for task_id in config.model.task_ids:
        single = single_task_config(config, task_id)
        report = run_experiment(single, target_map={task_id: 1})
        if report.failed:
            errors = [r.error for r in report.seed_results if r.error]
            raise ConfigError(f"single-task baseline for task {task_id} failed: {errors}")
        per_seed = {str(r.seed): r.final_metric[1] for r in report.seed_results}
        kind = config.model.task(task_id).loss
        tasks[str(task_id)] = {
            "metric": task_metric_name(kind),
            "lower_is_better": metric_is_lower_better(kind),
            "baseline": float(np.mean(list(per_seed.values()))),
            "per_seed": per_seed,
        }
    return {"tasks": tasks}


def write_baselines(baselines: dict, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, BASELINES_FILE)
    with open(path, "w") as fh:
        json.dump(baselines, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _metric_columns(task_ids) -> list[str]:
    cols = ["seed", "method", "epoch"]
    for tid in task_ids:
        cols += [f"train_loss_{tid}", f"eval_loss_{tid}", f"metric_{tid}",
                 f"weight_{tid}", f"share_{tid}"]
    cols.append("delta_m")
    return cols


def write_report(report: RunReport, out_dir: str) -> dict[str, str]:
    """Emit metrics.csv, run_log.jsonl, strength.jsonl, and summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    task_ids = [t["id"] for t in report.config["model"]["tasks"]]
    paths = {}

    paths["metrics"] = os.path.join(out_dir, METRICS_FILE)
    with open(paths["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_metric_columns(task_ids))
        for res in report.seed_results:
            for row in res.rows:
                record = [row.seed, row.method, row.epoch]
                for tid in task_ids:
                    record += [repr(float(row.train_loss[tid])), repr(float(row.eval_loss[tid])),
                               repr(float(row.metric[tid])), repr(float(row.weight[tid])),
                               repr(float(row.share[tid]))]
                record.append("" if row.delta_m is None else repr(float(row.delta_m)))
                writer.writerow(record)

    paths["run_log"] = os.path.join(out_dir, RUN_LOG_FILE)
    with open(paths["run_log"], "w") as fh:
        for res in report.seed_results:
            for row in res.log_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    paths["strength"] = os.path.join(out_dir, STRENGTH_FILE)
    with open(paths["strength"], "w") as fh:
        for res in report.seed_results:
            for row in res.strength_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    summary = {
        "config": report.config,
        "status": "failed" if report.failed else "ok",
        "violations": report.violations,
        "errors": {str(r.seed): r.error for r in report.seed_results if r.error},
        "per_seed_final_eval": {str(r.seed): {str(t): v for t, v in r.final_eval.items()}
                                for r in report.seed_results},
        "per_seed_final_metric": {str(r.seed): {str(t): v for t, v in r.final_metric.items()}
                                  for r in report.seed_results},
        "per_seed_final_delta_m": {str(r.seed): (r.rows[-1].delta_m if r.rows else None)
                                   for r in report.seed_results},
        "mean_final_delta_m": report.mean_final_delta_m(),
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    paths["summary"] = os.path.join(out_dir, SUMMARY_FILE)
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def read_metrics(path: str) -> list[dict]:
    """Parse a metrics.csv back into typed rows (exact float round trip)."""
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            row: dict = {"seed": int(record["seed"]), "method": record["method"],
                         "epoch": int(record["epoch"])}
            for key, value in record.items():
                if key in ("seed", "method", "epoch"):
                    continue
                row[key] = None if value == "" else float(value)
            rows.append(row)
    return rows
