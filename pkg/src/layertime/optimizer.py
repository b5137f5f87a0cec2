"""One-shot training: inexact layer-parallel solves + backtracking descent."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .mgrit import Budget, MgritSettings, solve_backward, solve_forward
from .network import (
    Batch,
    ControlTrajectory,
    Hyperparameters,
    accuracy,
    logits,
    loss_and_grad,
    regularizer_and_grad,
)
from .serial import StateTrajectory, forward_serial, predict

RECORD_FIELDS = (
    "iteration", "level", "work_units", "objective", "train_acc", "val_acc",
    "d_used", "fwd_residual", "bwd_residual", "step_size", "wall_seconds",
    # extras needed to re-check the line search from the log alone
    "objective_start", "grad_norm", "slope", "stalled", "backtracks", "fwd_iters",
    "bwd_iters",
)
WALL_CLOCK_FIELDS = ("work_units", "wall_seconds")


@dataclass(frozen=True)
class OptimizerConfig:
    step_init: float = 1.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 20
    rel_tol_mgrit: float | None = None
    mode: str = "nested"
    serial_line_search: bool = False
    direction: str = "steepest"
    lbfgs_memory: int = 10

    def __post_init__(self):
        if not self.step_init > 0:
            raise ValueError("step_init must be > 0")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must be in (0, 1)")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if self.mode not in ("nested", "non_nested"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.direction not in ("steepest", "lbfgs"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be >= 1")


@dataclass
class TrainingRecord:
    iteration: int
    level: int
    work_units: float
    objective: float
    train_acc: float
    val_acc: float
    d_used: int
    fwd_residual: float
    bwd_residual: float
    step_size: float
    wall_seconds: float
    objective_start: float
    grad_norm: float
    slope: float
    stalled: bool
    backtracks: int
    fwd_iters: int
    bwd_iters: int

    def row(self):
        return [getattr(self, f) for f in RECORD_FIELDS]


@dataclass
class TrainingLog:
    """Per-iteration records plus refinement events."""

    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    seconds_per_unit: float | None = None

    @property
    def total_work_units(self) -> float:
        return self.records[-1].work_units if self.records else 0.0

    @property
    def total_seconds(self) -> float:
        return float(sum(r.wall_seconds for r in self.records))

    def append(self, rec: TrainingRecord):
        self.records.append(rec)

    def final(self):
        return self.records[-1] if self.records else None

    def as_dicts(self):
        return [asdict(r) for r in self.records]


class LbfgsMemory:
    """Curvature pairs for limited-memory BFGS directions.

    Pairs are formed from consecutive (inexact) gradients and skipped when
    the curvature condition ``s.y > 0`` fails, so the direction always stays
    a descent direction for the gradient it is applied to.
    """

    def __init__(self, size: int = 10):
        self.size = size
        self.pairs = []
        self._last = None

    def observe(self, x: np.ndarray, g: np.ndarray):
        if self._last is not None:
            s = x - self._last[0]
            y = g - self._last[1]
            sy = s @ y
            if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
                self.pairs.append((s, y, 1.0 / sy))
                del self.pairs[:-self.size]
        self._last = (x, g)

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Approximate inverse-Hessian times ``g`` (two-loop recursion)."""
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            q -= a * y
            alphas.append(a)
        if self.pairs:
            s, y, rho = self.pairs[-1]
            q *= 1.0 / (rho * (y @ y))
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        return q


@dataclass
class StepResult:
    theta: ControlTrajectory
    states: StateTrajectory
    adjoint: object
    info: dict


def _trial_objective(theta, batch, hyper, budget, warm, settings, serial):
    if serial:
        states = forward_serial(theta, batch, hyper)
    else:
        states, _ = solve_forward(theta, batch, hyper, budget, warm, settings)
    S = states.states
    loss = loss_and_grad(S[-1], batch.labels, theta.W_out, theta.b_out)[0]
    return loss + regularizer_and_grad(theta, hyper)[0], states


def one_shot_step(theta: ControlTrajectory, batch: Batch, budget: Budget, warm_states=None,
                  warm_adjoint=None, config: OptimizerConfig = OptimizerConfig(),
                  hyper: Hyperparameters = Hyperparameters(),
                  settings: MgritSettings | None = None,
                  memory: LbfgsMemory | None = None) -> StepResult:
    """One optimization iteration with budgeted forward and adjoint solves.

    The search direction is the negative gradient, or the L-BFGS direction
    when ``config.direction == "lbfgs"`` (``memory`` carries the curvature
    pairs between calls). Armijo backtracking starts at
    ``config.step_init``; trial points are evaluated with a warm-started
    forward solve on the same budget, or serially when
    ``config.serial_line_search`` is set. If no trial satisfies the
    sufficient-decrease test the step is rejected and flagged as stalled.
    """
    states, fstat = solve_forward(theta, batch, hyper, budget, warm_states, settings)
    back = solve_backward(theta, states, batch, hyper, budget, warm_adjoint, settings)
    grad = back["grad"]
    f0 = back["loss"] + back["regularizer"]
    gvec = grad.flatten()
    gnorm2 = float(gvec @ gvec)
    if config.direction == "lbfgs" and gnorm2 > 0.0:
        if memory is None:
            memory = LbfgsMemory(config.lbfgs_memory)
        memory.observe(theta.flatten(), gvec)
        step_dir = ControlTrajectory.unflatten(memory.direction(gvec), theta.shape)
        slope = grad.dot(step_dir)
        if not slope > 0:
            step_dir, slope = grad, gnorm2
    else:
        step_dir, slope = grad, gnorm2
    info = {
        "objective_start": f0,
        "grad_norm": float(np.sqrt(gnorm2)),
        "slope": float(slope),
        "fwd_residual": fstat.final_relative_residual,
        "bwd_residual": back["status"].final_relative_residual,
        "fwd_iters": fstat.iterations_performed,
        "bwd_iters": back["status"].iterations_performed,
        "fwd_status": fstat,
        "bwd_status": back["status"],
        "grad": grad,
    }
    if gnorm2 == 0.0:
        info.update(objective=f0, step_size=config.step_init, stalled=False, backtracks=0)
        return StepResult(theta, states, back["adjoint"], info)

    alpha = config.step_init
    for k in range(config.max_backtracks + 1):
        trial = theta.axpy(-alpha, step_dir)
        if trial.is_finite():
            try:
                f, trial_states = _trial_objective(
                    trial, batch, hyper, budget, states, settings, config.serial_line_search)
            except FloatingPointError:
                f = np.inf
            if f <= f0 - config.armijo_c * alpha * slope:
                info.update(objective=f, step_size=alpha, stalled=False, backtracks=k)
                return StepResult(trial, trial_states, back["adjoint"], info)
        alpha *= config.shrink
    info.update(objective=f0, step_size=0.0, stalled=True, backtracks=config.max_backtracks)
    return StepResult(theta, states, back["adjoint"], info)


@dataclass
class TrainingContext:
    """Data and settings shared by every optimization iteration of a run."""

    train: Batch
    val: Batch | None
    hyper: Hyperparameters
    config: OptimizerConfig
    settings: MgritSettings
    seconds_per_unit: float | None = None
    log: TrainingLog = field(default_factory=TrainingLog)

    def work_units(self, seconds: float) -> float:
        return seconds / (self.seconds_per_unit or 1.0)


def train_level(ctx: TrainingContext, theta: ControlTrajectory, m: int, budget_for,
                level: int = 0, warm=(None, None)):
    """Run ``m`` one-shot iterations on the current grid.

    ``budget_for(i)`` gives the solver budget of the ``i``-th iteration on
    this level. Records are appended to ``ctx.log``. Returns the updated
    controls and the ``(states, adjoint)`` warm start for the next call.
    """
    states, adjoint = warm
    elapsed = ctx.log.total_seconds
    memory = LbfgsMemory(ctx.config.lbfgs_memory)
    for i in range(m):
        budget = budget_for(i)
        t0 = time.perf_counter()
        step = one_shot_step(theta, ctx.train, budget, states, adjoint, ctx.config,
                             ctx.hyper, ctx.settings, memory)
        dt = time.perf_counter() - t0
        elapsed += dt
        theta, states, adjoint = step.theta, step.states, step.adjoint
        info = step.info
        out = logits(states.states[-1], theta.W_out, theta.b_out)
        train_acc = accuracy(out, ctx.train.labels)
        val_acc = (accuracy(predict(theta, ctx.val.features, ctx.hyper), ctx.val.labels)
                   if ctx.val is not None and len(ctx.val) else float("nan"))
        ctx.log.append(TrainingRecord(
            iteration=i, level=level, work_units=ctx.work_units(elapsed),
            objective=float(info["objective"]), train_acc=train_acc, val_acc=val_acc,
            d_used=budget.max_iters, fwd_residual=float(info["fwd_residual"]),
            bwd_residual=float(info["bwd_residual"]), step_size=float(info["step_size"]),
            wall_seconds=dt, objective_start=float(info["objective_start"]),
            grad_norm=info["grad_norm"], slope=info["slope"], stalled=bool(info["stalled"]),
            backtracks=int(info["backtracks"]), fwd_iters=int(info["fwd_iters"]),
            bwd_iters=int(info["bwd_iters"]),
        ))
    return theta, (states, adjoint)


def train_non_nested(shape, m: int, hyper: Hyperparameters, train: Batch, val: Batch | None,
                     config: OptimizerConfig, seed: int, settings: MgritSettings | None = None,
                     d: int = 2, seconds_per_unit: float | None = None):
    """Train directly on the finest grid from a fresh initialization.

    Returns ``(theta, log)``; every record has level 0.
    """
    from .nested import init_controls

    ctx = TrainingContext(train, val, hyper, config, settings or MgritSettings(),
                          seconds_per_unit)
    ctx.log.seconds_per_unit = seconds_per_unit
    theta = init_controls(shape, hyper, seed)
    budget = Budget(d, config.rel_tol_mgrit)
    theta, _ = train_level(ctx, theta, m, lambda i: budget, level=0)
    return theta, ctx.log


def calibrate_work_unit(shape, hyper: Hyperparameters, train: Batch, config: OptimizerConfig,
                        probe_iters: int = 30, seed: int = 0,
                        settings: MgritSettings | None = None, d: int = 2,
                        warmup: int = 10) -> float:
    """Mean wall-clock seconds of one non-nested fine-grid iteration.

    ``warmup`` untimed iterations run first (at least one). Iterations right
    after initialization are measurably cheaper than later ones, so timing
    them alone would understate the cost of a run.
    """
    if probe_iters < 3:
        raise ValueError("probe_iters must be >= 3")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    warmup = max(1, warmup)
    from .nested import init_controls

    settings = settings or MgritSettings()
    theta = init_controls(shape, hyper, seed)
    budget = Budget(d, config.rel_tol_mgrit)
    states = adjoint = None
    memory = LbfgsMemory(config.lbfgs_memory)
    times = []
    for i in range(warmup + probe_iters):
        t0 = time.perf_counter()
        step = one_shot_step(theta, train, budget, states, adjoint, config, hyper, settings,
                             memory)
        dt = time.perf_counter() - t0
        theta, states, adjoint = step.theta, step.states, step.adjoint
        if i >= warmup:
            times.append(dt)
    return max(float(np.mean(times)), np.finfo(float).tiny)
