"""Nested iteration: train shallow, refine the layer grid by two, repeat."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError
from .mgrit import Budget, MgritSettings
from .network import Batch, ControlTrajectory, Hyperparameters, NetworkShape
from .optimizer import OptimizerConfig, TrainingContext, train_level
from .serial import AdjointTrajectory, StateTrajectory

POST_REFINE_TOL = 1e-4


@dataclass(frozen=True)
class NestedSchedule:
    """Level schedule; ``m`` runs coarsest first, i.e. ``m[0]`` is m^(L-1)."""

    L: int
    N_coarsest: int
    m: tuple
    interpolation: str = "constant"
    d_post_refine: int = 10
    post_refine_span: int = 3
    d_steady: int = 2
    tolerance_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(x) for x in self.m))
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.N_coarsest < 1:
            raise ValueError("N_coarsest must be >= 1")
        if len(self.m) != self.L:
            raise ValueError(f"need {self.L} iteration counts, got {len(self.m)}")
        if any(x < 1 for x in self.m):
            raise ValueError("iteration counts must be >= 1")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if not self.d_post_refine >= self.d_steady >= 1:
            raise ValueError("need d_post_refine >= d_steady >= 1")
        if self.post_refine_span < 0:
            raise ValueError("post_refine_span must be >= 0")

    def layers_at(self, level: int) -> int:
        return self.N_coarsest * 2 ** (self.L - 1 - level)

    @property
    def N_finest(self) -> int:
        return self.layers_at(0)


def _refined(theta: ControlTrajectory, W, b) -> ControlTrajectory:
    return ControlTrajectory(theta.W_in.copy(), W, b, theta.W_out.copy(), theta.b_out.copy(),
                             theta.shape.with_layers(2 * theta.shape.N))


def interpolate_constant(theta: ControlTrajectory) -> ControlTrajectory:
    """Piece-wise constant refinement: fine layers 2n and 2n+1 copy coarse layer n."""
    return _refined(theta, np.repeat(theta.W, 2, axis=0), np.repeat(theta.b, 2, axis=0))


def interpolate_linear(theta: ControlTrajectory) -> ControlTrajectory:
    """Linear-in-time refinement.

    Even fine layers copy the coarse layers, odd ones take the midpoint of
    their two coarse neighbours. The last odd layer has no right neighbour
    and copies the final coarse layer instead.
    """
    def refine(a):
        out = np.repeat(a, 2, axis=0)
        out[1:-1:2] = 0.5 * (a[:-1] + a[1:])
        return out

    return _refined(theta, refine(theta.W), refine(theta.b))


INTERPOLATIONS = {"constant": interpolate_constant, "linear": interpolate_linear}


def interpolate_states(arr: np.ndarray) -> np.ndarray:
    """Refine ``(N+1, ...)`` solver data to ``(2N+1, ...)``, piece-wise constant."""
    return np.repeat(arr, 2, axis=0)[:-1]


def d_for_iteration(iters_since_refinement: int, schedule: NestedSchedule,
                    refined: bool = True) -> int:
    """Multigrid iterations per solve for an optimization iteration.

    The first ``post_refine_span`` iterations after a refinement get the
    larger budget; the coarsest level (never refined) always gets the
    steady one.
    """
    if refined and iters_since_refinement < schedule.post_refine_span:
        return schedule.d_post_refine
    return schedule.d_steady


def init_controls(shape: NetworkShape, hyper: Hyperparameters, rng_seed) -> ControlTrajectory:
    """Seeded initial controls.

    Opening and classification layers are uniform on ``[-r, r]`` with
    ``r = hyper.opening_scale`` (default ``1/sqrt(w)``); internal layers are
    uniform on ``[-w_i, w_i]``. The outer layers are drawn first, so they do
    not depend on ``N`` or ``w_i`` for a given seed.
    """
    rng = np.random.default_rng(rng_seed)
    r = hyper.opening_scale if hyper.opening_scale is not None else 1.0 / np.sqrt(shape.w)
    W_in = rng.uniform(-r, r, (shape.w, shape.n_f))
    W_out = rng.uniform(-r, r, (shape.n_c, shape.w))
    b_out = rng.uniform(-r, r, shape.n_c)
    if hyper.w_i == 0:
        W = np.zeros((shape.N, shape.w, shape.w))
        b = np.zeros((shape.N, shape.w))
    else:
        W = rng.uniform(-hyper.w_i, hyper.w_i, (shape.N, shape.w, shape.w))
        b = rng.uniform(-hyper.w_i, hyper.w_i, (shape.N, shape.w))
    return ControlTrajectory(W_in, W, b, W_out, b_out, shape)


def _budget_policy(schedule: NestedSchedule, config: OptimizerConfig, refined: bool):
    def budget_for(i):
        d = d_for_iteration(i, schedule, refined)
        post = refined and i < schedule.post_refine_span
        tol = POST_REFINE_TOL if (schedule.tolerance_mode and post) else config.rel_tol_mgrit
        return Budget(d, tol)

    return budget_for


def nested_train(schedule: NestedSchedule, shape: NetworkShape, hyper: Hyperparameters,
                 train: Batch, val: Batch | None, config: OptimizerConfig, rng_seed,
                 settings: MgritSettings | None = None,
                 seconds_per_unit: float | None = None):
    """Train coarse-to-fine with grid refinement between levels.

    ``shape`` describes the finest network; its ``N`` must equal
    ``schedule.N_finest``. Returns ``(theta_fine, log)``.
    """
    if shape.N != schedule.N_finest:
        raise ValueError(
            f"finest network has {shape.N} layers but schedule gives {schedule.N_finest}")
    ctx = TrainingContext(train, val, hyper, config, settings or MgritSettings(),
                          seconds_per_unit)
    ctx.log.seconds_per_unit = seconds_per_unit
    interpolate = INTERPOLATIONS[schedule.interpolation]
    theta = init_controls(shape.with_layers(schedule.N_coarsest), hyper, rng_seed)
    warm = (None, None)
    for k, level in enumerate(range(schedule.L - 1, -1, -1)):
        policy = _budget_policy(schedule, config, refined=level < schedule.L - 1)
        try:
            theta, warm = train_level(ctx, theta, schedule.m[k], policy, level=level, warm=warm)
        except BlowUpError as exc:
            raise BlowUpError(f"nested level {level} ({theta.shape.N} layers): {exc}",
                              layer=exc.layer, level=exc.level) from exc
        if level == 0:
            break
        t0 = time.perf_counter()
        theta = interpolate(theta)
        states, adjoint = warm
        warm = (
            StateTrajectory(interpolate_states(states.states), theta.shape.h)
            if states is not None else None,
            AdjointTrajectory(interpolate_states(adjoint.costates))
            if adjoint is not None else None,
        )
        ctx.log.events.append({
            "level": level - 1,
            "N": theta.shape.N,
            "interpolation": schedule.interpolation,
            "after_record": len(ctx.log.records),
            "wall_seconds": time.perf_counter() - t0,
        })
    return theta, ctx.log
