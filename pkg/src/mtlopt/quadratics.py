"""Convex quadratic benchmark problems and brute-force oracles.

Each task's loss is ||A_i theta - b_i||^2 over a parameter vector that
splits into shared coordinates (seen by every task) and optional per-task
coordinate blocks (seen only by their task, mirroring the shared /
task-specific parameter partition of the trained networks). Because every
task can zero its own residual through its private block, a common
zero-gradient point exists even when the per-task minimizers are far
apart, so convergence of the projected dynamics is observable as all
shared gradients vanishing.

The priority oracle evaluates candidate updates by direct recomputation of
the total loss and is kept independent of the optimized update paths.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import substream

PRIORITY_TIE = 0  # returned by the oracle when neither task wins


@dataclass
class QuadraticProblem:
    """K convex quadratic task losses over one parameter vector."""

    matrices: list[np.ndarray]       # A_i, each (m_i, n)
    offsets: list[np.ndarray]        # b_i, each (m_i,)
    shared_dim: int                  # coordinates 0..shared_dim-1 are shared
    task_slices: list[slice]         # per-task private coordinate blocks (may be empty)
    minimizers: np.ndarray           # (K, n), one constructed minimizer per task
    lipschitz: float                 # H = max_i 2 * lambda_max(A_i^T A_i)

    @property
    def num_tasks(self) -> int:
        return len(self.matrices)

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[1]

    def loss(self, task: int, theta: np.ndarray) -> float:
        r = self.matrices[task] @ theta - self.offsets[task]
        return float(r @ r)

    def total_loss(self, theta: np.ndarray, weights: np.ndarray) -> float:
        return float(sum(w * self.loss(i, theta) for i, w in enumerate(weights)))

    def gradient(self, task: int, theta: np.ndarray) -> np.ndarray:
        a = self.matrices[task]
        return 2.0 * a.T @ (a @ theta - self.offsets[task])

    def shared_gradient(self, task: int, theta: np.ndarray) -> np.ndarray:
        return self.gradient(task, theta)[:self.shared_dim]

    def task_gradient(self, task: int, theta: np.ndarray) -> np.ndarray:
        sl = self.task_slices[task]
        return self.gradient(task, theta)[sl]

    def gradient_functional(self, theta: np.ndarray, weights: np.ndarray) -> float:
        """Sum of w_k^2 ||g_k||^2 over the shared coordinates."""
        return float(sum(w * w * np.sum(self.shared_gradient(k, theta) ** 2)
                         for k, w in enumerate(weights)))

    def has_conflict(self, theta: np.ndarray) -> bool:
        """Any task pair with non-positive shared-gradient dot product."""
        grads = [self.shared_gradient(k, theta) for k in range(self.num_tasks)]
        for i in range(self.num_tasks):
            for j in range(i + 1, self.num_tasks):
                if float(grads[i] @ grads[j]) <= 0.0:
                    return True
        return False

    def to_record(self) -> dict:
        return {
            "shared_dim": self.shared_dim,
            "task_slices": [[s.start, s.stop] for s in self.task_slices],
            "lipschitz": self.lipschitz,
            "matrices": [a.tolist() for a in self.matrices],
            "offsets": [b.tolist() for b in self.offsets],
            "minimizers": self.minimizers.tolist(),
        }


def compute_lipschitz(matrices: Sequence[np.ndarray]) -> float:
    """H = max_i 2 * lambda_max(A_i^T A_i), the gradient Lipschitz constant."""
    return float(max(2.0 * np.linalg.eigvalsh(a.T @ a).max() for a in matrices))


def dump_problem(problem: QuadraticProblem, path: str) -> None:
    """Write the problem as a JSON record for cross-implementation checks."""
    import json

    with open(path, "w") as fh:
        json.dump(problem.to_record(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_problem(path: str) -> QuadraticProblem:
    import json

    with open(path) as fh:
        rec = json.load(fh)
    return QuadraticProblem(
        matrices=[np.asarray(a, dtype=np.float64) for a in rec["matrices"]],
        offsets=[np.asarray(b, dtype=np.float64) for b in rec["offsets"]],
        shared_dim=int(rec["shared_dim"]),
        task_slices=[slice(a, b) for a, b in rec["task_slices"]],
        minimizers=np.asarray(rec["minimizers"], dtype=np.float64),
        lipschitz=float(rec["lipschitz"]),
    )


def _conditioned_matrix(rng: np.random.Generator, rows: int, cols: int,
                        smin: float = 0.6, smax: float = 1.4) -> np.ndarray:
    """Random matrix with singular values sampled from [smin, smax]."""
    u, _ = np.linalg.qr(rng.normal(size=(rows, rows)))
    v, _ = np.linalg.qr(rng.normal(size=(cols, cols)))
    s = np.zeros((rows, cols))
    for i in range(min(rows, cols)):
        s[i, i] = rng.uniform(smin, smax)
    return u @ s @ v.T


def make_quadratic_problem(dim: int, K: int, conflict: float, seed: int,
                           task_dim: int | None = None) -> QuadraticProblem:
    """Generate a K-task quadratic with minimizers separated by ``conflict``.

    ``dim`` is the number of shared coordinates; each task additionally owns
    ``task_dim`` private coordinates (defaults to ``dim``; 0 gives a purely
    shared problem). Task i's constructed minimizer displaces a common point
    by ``conflict`` along a random shared direction, so conflict 0 makes all
    minimizers coincide. Deterministic for fixed arguments.
    """
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    if K < 2:
        raise ConfigError("K must be >= 2")
    if not 0.0 <= conflict <= 1.0:
        raise ConfigError("conflict level must lie in [0, 1]")
    td = dim if task_dim is None else int(task_dim)
    if td < 0:
        raise ConfigError("task_dim must be >= 0")
    rng = substream(seed, f"quadratic-{dim}-{K}-{td}")

    n = dim + K * td
    slices = [slice(dim + i * td, dim + (i + 1) * td) for i in range(K)]
    common = rng.normal(size=n) * 0.5

    matrices: list[np.ndarray] = []
    offsets: list[np.ndarray] = []
    minimizers = np.empty((K, n))
    m_rows = max(dim, td) if td > 0 else dim
    for i in range(K):
        a = np.zeros((m_rows, n))
        a[:, :dim] = _conditioned_matrix(rng, m_rows, dim)
        if td > 0:
            a[:, slices[i]] = _conditioned_matrix(rng, m_rows, td)
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        theta_star = common.copy()
        theta_star[:dim] += conflict * direction
        matrices.append(a)
        offsets.append(a @ theta_star)
        minimizers[i] = theta_star
    return QuadraticProblem(matrices, offsets, dim, slices, minimizers,
                            compute_lipschitz(matrices))


def make_conflicting_quadratic(dim: int, K: int, seed: int, conflict: float = 1.0,
                               task_dim: int | None = None,
                               max_tries: int = 64) -> QuadraticProblem:
    """A generated problem whose tasks conflict at the zero start point."""
    theta0 = None
    for attempt in range(max_tries):
        problem = make_quadratic_problem(dim, K, conflict, seed + 1_000_003 * attempt, task_dim)
        theta0 = np.zeros(problem.dim)
        if problem.has_conflict(theta0):
            return problem
    raise ConfigError(f"no conflicting instance found near seed {seed}")


# ---------------------------------------------------------------------------
# priority oracle and priority-update comparison
# ---------------------------------------------------------------------------

def priority_oracle(problem: QuadraticProblem, theta: np.ndarray,
                    block: Sequence[int], task_m: int, task_n: int,
                    weights: np.ndarray, eta: float,
                    tie_tol: float = 1e-12) -> int:
    """Which of two tasks' gradient steps on the block lowers the total loss?

    Both candidates are evaluated by direct recomputation: the block is
    stepped by -eta times the candidate task's (unweighted) gradient while
    everything else stays fixed. Returns the winning task index, or
    PRIORITY_TIE when the difference is below ``tie_tol``.
    """
    idx = np.asarray(block, dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("priority_oracle: block must be nonempty")
    losses = {}
    for task in (task_m, task_n):
        candidate = theta.copy()
        candidate[idx] -= eta * problem.gradient(task, theta)[idx]
        losses[task] = problem.total_loss(candidate, weights)
    if abs(losses[task_m] - losses[task_n]) < tie_tol:
        return PRIORITY_TIE
    return task_m if losses[task_m] < losses[task_n] else task_n


def oracle_priority_partition(problem: QuadraticProblem, theta: np.ndarray,
                              weights: np.ndarray, eta: float,
                              block_size: int = 1) -> np.ndarray:
    """Owner task per shared-coordinate block by direct loss evaluation.

    For each block, every task's candidate step is evaluated in full; the
    argmin wins, ties go to the lowest task index.
    """
    owners = np.zeros(problem.shared_dim, dtype=np.intp)
    for start in range(0, problem.shared_dim, block_size):
        idx = np.arange(start, min(start + block_size, problem.shared_dim))
        best_task, best_loss = 0, np.inf
        for task in range(problem.num_tasks):
            candidate = theta.copy()
            candidate[idx] -= eta * problem.gradient(task, theta)[idx]
            loss = problem.total_loss(candidate, weights)
            if loss < best_loss - 1e-15:
                best_task, best_loss = task, loss
        owners[idx] = best_task
    return owners


@dataclass
class PriorityUpdateResult:
    loss_priority: float
    loss_sum: float
    holds: bool


def priority_update_check(problem: QuadraticProblem, theta: np.ndarray,
                          owners: np.ndarray, weights: np.ndarray, eta: float,
                          tol: float = 1e-10) -> PriorityUpdateResult:
    """Priority-partition update vs weighted-sum update, total loss compared.

    The priority update steps every shared coordinate by its owner task's
    unweighted gradient; the reference update steps all shared coordinates
    by the weighted gradient sum. Both leave task-private blocks untouched.
    """
    grads = [problem.gradient(k, theta) for k in range(problem.num_tasks)]
    ds = problem.shared_dim

    theta_priority = theta.copy()
    for p in range(ds):
        theta_priority[p] -= eta * grads[int(owners[p])][p]

    theta_sum = theta.copy()
    combined = sum(w * g[:ds] for w, g in zip(weights, grads))
    theta_sum[:ds] -= eta * combined

    loss_priority = problem.total_loss(theta_priority, weights)
    loss_sum = problem.total_loss(theta_sum, weights)
    return PriorityUpdateResult(loss_priority, loss_sum,
                                loss_priority <= loss_sum + tol)


def model_priority_oracle(model, batch, layer_index: int, channel: int,
                          weights: dict[int, float], eta: float) -> int:
    """Priority owner of one conv out-channel by direct loss evaluation.

    Each candidate task's (unweighted) gradient steps just that channel's
    kernel slice; the task whose step leaves the smallest weighted total
    loss wins, ties to the lowest task id. Brute force by construction;
    independent of the strength-based grouping.
    """
    from .autodiff import Tape
    from .network import per_task_gradients

    layer = model.trunk[layer_index]
    name = f"trunk.{layer_index}.weight"
    grads = {}
    for tid in model.spec.task_ids:
        model.zero_grad()
        _, gs, _ = per_task_gradients(model, batch, tid, loss_weight=1.0)
        grads[tid] = gs.entries[name][channel].copy()
    model.zero_grad()

    def total_loss() -> float:
        total = 0.0
        for tid in model.spec.task_ids:
            tape = Tape()
            pred = model.forward(batch.x, tid, tape, mode="train")
            loss = tape.compute_loss(pred, batch.targets[tid], model.spec.task(tid).loss)
            total += weights[tid] * loss.item()
        return total

    saved = layer.weight.data[channel].copy()
    saved_stats = [(st.running_mean.copy(), st.running_var.copy())
                   for st in layer.bn.values()] if layer.bn else []
    best_task, best_loss = None, np.inf
    for tid in model.spec.task_ids:
        layer.weight.data[channel] = saved - eta * grads[tid]
        loss = total_loss()
        if loss < best_loss - 1e-15:
            best_task, best_loss = tid, loss
        layer.weight.data[channel] = saved
        if layer.bn:
            for st, (rm, rv) in zip(layer.bn.values(), saved_stats):
                st.running_mean[...] = rm
                st.running_var[...] = rv
    return best_task


# ---------------------------------------------------------------------------
# convergence probe
# ---------------------------------------------------------------------------

def _fast_priority_owners(problem: QuadraticProblem, theta: np.ndarray,
                          residuals: list[np.ndarray], shared_grads: np.ndarray,
                          weights: np.ndarray, eta: float,
                          col_curvature: np.ndarray) -> np.ndarray:
    """Per-coordinate owners via the exact closed form of the loss change.

    For a quadratic, moving one coordinate by delta changes the total loss
    by 2*delta*G_p + delta^2/2*C_p, with G_p half the weighted-gradient
    coordinate and C_p the weighted second derivative. This equals the
    direct evaluation the brute-force oracle performs (cross-checked in
    tests); third derivatives vanish.
    """
    half_grad = np.zeros(problem.shared_dim)
    for k, w in enumerate(weights):
        half_grad += w * (problem.matrices[k][:, :problem.shared_dim].T @ residuals[k])
    delta = -eta * shared_grads  # (K, shared_dim)
    change = 2.0 * delta * half_grad[None, :] + 0.5 * delta * delta * col_curvature[None, :]
    return np.argmin(change, axis=0)


@dataclass
class ProbeResult:
    functional_trace: np.ndarray      # sum_k w_k^2 ||g_k||^2 over shared coords, per iter
    min_prefix: np.ndarray
    fitted_exponent: float
    converged_iteration: int | None   # first iteration with functional < target
    eta_warning: str | None = None


def fit_decay_exponent(trace: np.ndarray, skip: int = 10, floor: float = 1e-12) -> float:
    """Log-log slope of the min-prefix trace over its decaying stretch.

    The fit stops at the first crossing of ``floor`` so the machine-precision
    plateau cannot flatten the slope estimate.
    """
    prefix = np.minimum.accumulate(trace)
    below = np.nonzero(prefix <= floor)[0]
    stop = int(below[0]) + 1 if below.size else len(prefix)
    t = np.arange(1, len(prefix) + 1)[skip:stop]
    y = prefix[skip:stop]
    if len(t) < 2 or np.any(y <= 0):
        return -np.inf  # already at the floor: decay faster than any power law
    coeffs = np.polyfit(np.log(t), np.log(y), 1)
    return float(coeffs[0])


def convergence_probe(problem: QuadraticProblem, method: str, eta: float,
                      max_iters: int, weights: np.ndarray | None = None,
                      theta0: np.ndarray | None = None,
                      stop_functional: float = 0.0,
                      target_functional: float = 1e-6) -> ProbeResult:
    """Iterate GD or priority-projected (phase-2 style) dynamics and record
    the weighted shared-gradient functional.

    ``stop_functional`` > 0 stops early once the functional falls below it;
    the trace holds one entry per executed iteration.
    """
    if method not in ("gd", "phase2"):
        raise ConfigError(f"unknown probe method {method!r}")
    k = problem.num_tasks
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    theta = np.zeros(problem.dim) if theta0 is None else theta0.astype(np.float64).copy()

    bound = 1.0 / (problem.lipschitz * w.max())
    warning = None
    if eta > bound:
        warning = (f"eta {eta:g} above the sufficient bound 1/(H max w) = {bound:g}; "
                   "proceeding anyway")

    ds = problem.shared_dim
    col_curvature = np.zeros(ds)
    for kk in range(k):
        cols = problem.matrices[kk][:, :ds]
        col_curvature += 2.0 * w[kk] * (cols * cols).sum(axis=0)

    trace = []
    converged_at = None
    for it in range(max_iters):
        residuals = [problem.matrices[i] @ theta - problem.offsets[i] for i in range(k)]
        shared_grads = np.stack([
            2.0 * problem.matrices[i][:, :ds].T @ residuals[i] for i in range(k)])
        functional = float(sum(w[i] ** 2 * np.sum(shared_grads[i] ** 2) for i in range(k)))
        trace.append(functional)
        if converged_at is None and functional < target_functional:
            converged_at = it
        if stop_functional > 0.0 and functional < stop_functional:
            break

        if method == "gd":
            shared_update = (w[:, None] * shared_grads).sum(axis=0)
        else:
            owners = _fast_priority_owners(problem, theta, residuals, shared_grads,
                                           w, eta, col_curvature)
            own = shared_grads[owners, np.arange(ds)]
            agree = shared_grads * own[None, :] >= 0.0  # sign-compatible with owner
            zero_ref = own == 0.0
            keep = agree | zero_ref[None, :]
            shared_update = (w[:, None] * np.where(keep, shared_grads, 0.0)).sum(axis=0)

        # simultaneous update: private blocks use the same iteration-start residuals
        private_updates = []
        for i in range(k):
            sl = problem.task_slices[i]
            if sl.stop > sl.start:
                private_updates.append(
                    (sl, eta * w[i] * (2.0 * problem.matrices[i][:, sl].T @ residuals[i])))
        theta[:ds] -= eta * shared_update
        for sl, upd in private_updates:
            theta[sl] -= upd

    trace_arr = np.asarray(trace)
    return ProbeResult(trace_arr, np.minimum.accumulate(trace_arr),
                       fit_decay_exponent(trace_arr), converged_at, warning)
