"""Nonlinear multigrid-in-time (FAS) solver over the layer dimension.

The solver works on any one-step recurrence

    u[0] = u0,    u[n+1] = Phi_l(n, u[n]) + g_l[n+1]

where ``Phi_l`` is the propagator of level ``l`` (step size ``h * c**l``)
and ``g_l`` is the FAS right-hand side (zero on the finest level). Each
level keeps every ``c``-th point as a C-point. A V-cycle applies FCF
relaxation, injects states and residuals to the next level, recurses,
corrects the C-points and finishes with an F-relaxation. The coarsest
level is solved sequentially.

Propagators are called with an integer array of interval indices and a
stacked state array ``(K, ...)``; all intervals of a relaxation sweep are
advanced by one call, optionally split across worker threads. Chunks write
disjoint rows, so the result does not depend on the worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError
from .network import (
    Batch,
    ControlTrajectory,
    Hyperparameters,
    activation,
    activation_deriv,
    open_layer,
)
from .serial import AdjointTrajectory, StateTrajectory, assemble_gradient, output_gradients

log = logging.getLogger(__name__)

THREADS_ENV = "LAYERTIME_THREADS"


@dataclass(frozen=True)
class Level:
    """One layer grid: ``N`` intervals of size ``h``; ``stride`` fine layers each."""

    N: int
    h: float
    stride: int


@dataclass(frozen=True)
class MultigridHierarchy:
    """Ladder of layer grids; ``levels[0]`` is the finest."""

    levels: tuple
    c: int

    @property
    def L_mg(self) -> int:
        return len(self.levels)

    @property
    def degenerate(self) -> bool:
        return len(self.levels) == 1

    def cpoints(self, l: int) -> np.ndarray:
        return np.arange(0, self.levels[l].N + 1, self.c)


def build_hierarchy(N: int, c: int = 2, max_levels: int = 10, coarsest_max: int = 4,
                    h: float = 1.0) -> MultigridHierarchy:
    """Coarsen by ``c`` while divisible, above ``coarsest_max`` and under budget."""
    if c < 2:
        raise ValueError(f"coarsening factor must be >= 2, got {c}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    levels = [Level(N, h, 1)]
    while len(levels) < max_levels:
        cur = levels[-1].N
        if cur <= coarsest_max or cur % c:
            break
        stride = levels[-1].stride * c
        levels.append(Level(cur // c, h * stride, stride))
    return MultigridHierarchy(tuple(levels), c)


@dataclass(frozen=True)
class Budget:
    """Iteration budget for one solve: at most ``max_iters`` cycles, and stop
    early once the relative residual drops to ``rel_tol`` (if given)."""

    max_iters: int
    rel_tol: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class MgritStatus:
    iterations_performed: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    serial_fallback: bool = False

    @property
    def final_relative_residual(self) -> float:
        return _relative(self.residual_history[-1], self.residual_history[0])


@dataclass(frozen=True)
class MgritSettings:
    c: int = 2
    max_levels: int = 10
    coarsest_max: int = 4
    workers: int | None = None
    trace_path: str | None = None

    def resolved_workers(self) -> int:
        cap = os.environ.get(THREADS_ENV)
        n = self.workers if self.workers is not None else int(cap or 1)
        if cap:
            n = min(n, int(cap))
        return max(1, n)


def _relative(r, r0):
    if r0 == 0.0:
        return 0.0
    return r / r0


def _first_bad(arr):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


class FasSolver:
    """FAS V-cycle multigrid for a one-step recurrence on a hierarchy.

    Parameters
    ----------
    hierarchy : MultigridHierarchy
    propagate : callable
        ``propagate(level, idx, U)`` applies the level's propagator to the
        states ``U[k]`` of intervals ``idx[k]`` and returns the stack of
        results. Must not modify ``U``.
    workers : int
        Number of threads used for the interval-parallel sweeps.
    """

    def __init__(self, hierarchy: MultigridHierarchy, propagate, workers: int = 1,
                 trace_path=None):
        self.hierarchy = hierarchy
        self.propagate = propagate
        self.workers = max(1, int(workers))
        self.trace_path = trace_path
        self._pool = None
        self.u = None
        self.g = None

    # -- parallel primitives -------------------------------------------------

    def _sweep(self, l, src, u=None, g=None):
        """Compute ``Phi_l(src[k], u[src[k]]) (+ g[src[k]+1])`` for all k.

        Defaults to the level's own states and right-hand side.
        """
        if u is None:
            u, g = self.u[l], self.g[l]

        def work(idx):
            out = self.propagate(l, idx, u[idx])
            if g is not None:
                out = out + g[idx + 1]
            return idx, out

        if self.workers == 1 or len(src) < 2:
            return [work(src)]
        chunks = [c for c in np.array_split(src, self.workers) if len(c)]
        return list(self._pool.map(work, chunks))

    def _advance(self, l, src, what):
        u = self.u[l]
        for idx, out in self._sweep(l, src):
            u[idx + 1] = out
        bad = _first_bad(u[src + 1])
        if bad is not None:
            layer = int(src[bad] + 1)
            raise BlowUpError(f"relaxation blow-up ({what}) at layer {layer} on level {l}",
                              layer=layer, level=l)

    # -- relaxation ------------------------------------------------------------

    def f_relax(self, l):
        """Propagate from every C-point across its F-points."""
        c, N = self.hierarchy.c, self.hierarchy.levels[l].N
        starts = np.arange(0, N, c)
        for j in range(c - 1):
            src = starts + j
            src = src[src + 1 < np.minimum(starts + c, N + 1)]
            if len(src):
                self._advance(l, src, "F")

    def c_relax(self, l):
        """Update each C-point (except 0) from its preceding F-point."""
        c, N = self.hierarchy.c, self.hierarchy.levels[l].N
        src = np.arange(c, N + 1, c) - 1
        if len(src):
            self._advance(l, src, "C")

    def residual(self, l, cpoints_only=False):
        """``g[n] + Phi(u[n-1]) - u[n]`` for n >= 1; entry 0 is ``g[0] - u[0]``.

        Right after an F-relaxation the F-point residuals are exactly zero
        (they are recomputed with bit-identical arithmetic), so with
        ``cpoints_only`` only C-points are evaluated and the rest is zero.
        """
        u, g = self.u[l], self.g[l]
        N = self.hierarchy.levels[l].N
        if cpoints_only:
            r = np.zeros_like(u)
            src = np.arange(self.hierarchy.c, N + 1, self.hierarchy.c) - 1
        else:
            r = np.empty_like(u)
            src = np.arange(N)
        r[0] = 0.0 if g is None else g[0] - u[0]
        if len(src):
            for idx, out in self._sweep(l, src):
                r[idx + 1] = out - u[idx + 1]
        return r

    def serial_solve(self, l):
        u, g = self.u[l], self.g[l]
        if g is not None:
            u[0] = g[0]
        for n in range(self.hierarchy.levels[l].N):
            idx = np.array([n])
            nxt = self.propagate(l, idx, u[n : n + 1])[0]
            if g is not None:
                nxt = nxt + g[n + 1]
            if not np.isfinite(nxt).all():
                raise BlowUpError(f"serial blow-up at layer {n + 1} on level {l}",
                                  layer=n + 1, level=l)
            u[n + 1] = nxt

    # -- cycling -----------------------------------------------------------------

    def cycle(self, l=0):
        """One FAS V-cycle starting at level ``l``."""
        hier = self.hierarchy
        if l == hier.L_mg - 1:
            self.serial_solve(l)
            return
        c = hier.c
        self.f_relax(l)
        self.c_relax(l)
        self.f_relax(l)
        r = self.residual(l, cpoints_only=True)
        uc = self.u[l][::c].copy()
        Nc = hier.levels[l + 1].N
        # FAS right-hand side: restricted residual plus coarse operator at uc
        gc = np.empty_like(uc)
        gc[0] = uc[0]
        for idx, out in self._sweep(l + 1, np.arange(Nc), uc):
            gc[idx + 1] = uc[idx + 1] - out
        gc += r[::c]
        self.g[l + 1] = gc
        self.u[l + 1] = uc.copy()
        self.cycle(l + 1)
        self.u[l][::c] += self.u[l + 1] - uc
        self.f_relax(l)

    def residual_norm(self, cpoints_only=False) -> float:
        r = self.residual(0, cpoints_only)[1:]
        return float(np.sqrt(np.sum(r * r)))

    def reset(self, u0, initial=None):
        """Load finest-level states; cold start broadcasts ``u0`` to every layer."""
        hier = self.hierarchy
        N = hier.levels[0].N
        u0 = np.asarray(u0, dtype=float)
        if initial is None:
            fine = np.broadcast_to(u0, (N + 1,) + u0.shape).copy()
        else:
            fine = np.array(initial, dtype=float, copy=True)
            if fine.shape != (N + 1,) + u0.shape:
                raise ValueError(f"warm start has shape {fine.shape}")
            fine[0] = u0
        self.u = [fine] + [None] * (hier.L_mg - 1)
        self.g = [None] * hier.L_mg

    def solve(self, u0, budget: Budget, initial=None):
        """Iterate V-cycles on the finest level.

        Returns the finest-level states ``(N+1, ...)`` and an
        :class:`MgritStatus`. The residual history starts with the residual
        of the initial guess.
        """
        hier = self.hierarchy
        self.reset(u0, initial)
        status = MgritStatus(serial_fallback=hier.degenerate)
        if self.workers > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        trace = open(self.trace_path, "a") if self.trace_path else None
        try:
            status.residual_history.append(self.residual_norm())
            r0 = status.residual_history[0]
            for it in range(1, budget.max_iters + 1):
                self.cycle(0)
                res = self.residual_norm(cpoints_only=True)
                status.residual_history.append(res)
                status.iterations_performed = it
                rel = _relative(res, r0)
                if trace is not None:
                    trace.write(f"{hier.L_mg}, {it}, {res:.6e}, {rel:.6e}\n")
                if res == 0.0 or (budget.rel_tol is not None and rel <= budget.rel_tol):
                    status.converged = True
                    break
        finally:
            if trace is not None:
                trace.close()
            if self._pool is not None:
                self._pool.shutdown()
                self._pool = None
        states = self.u[0]
        self.u = self.g = None
        return states, status


# -- network-specific solves ---------------------------------------------------

def restrict_controls(theta: ControlTrajectory, c: int = 2) -> ControlTrajectory:
    """Inject internal-layer controls: coarse layer n takes fine layer c*n."""
    N = theta.shape.N
    if N % c:
        raise ValueError(f"N = {N} not divisible by c = {c}")
    return ControlTrajectory(
        theta.W_in, theta.W[::c].copy(), theta.b[::c].copy(), theta.W_out, theta.b_out,
        theta.shape.with_layers(N // c),
    )


def _forward_propagator(theta, hierarchy, eps):
    per_level = []
    for lev in hierarchy.levels:
        W = theta.W[:: lev.stride]
        per_level.append((np.swapaxes(W, 1, 2), theta.b[:: lev.stride][:, None, :], lev.h))

    def propagate(l, idx, U):
        WT, b, h = per_level[l]
        return U + h * activation(U @ WT[idx] + b[idx], eps)

    return propagate


def _adjoint_propagator(theta, states, hierarchy, eps):
    # time-reversed: interval k on level l is forward interval N_l - 1 - k
    Z = states[:-1] @ np.swapaxes(theta.W, 1, 2) + theta.b[:, None, :]
    D = activation_deriv(Z, eps)
    per_level = []
    for lev in hierarchy.levels:
        per_level.append((D[:: lev.stride][::-1], theta.W[:: lev.stride][::-1], lev.h))

    def propagate(l, idx, M):
        Dl, Wl, h = per_level[l]
        return M + h * ((Dl[idx] * M) @ Wl[idx])

    return propagate


def _solver_for(theta, settings, propagate):
    settings = settings or MgritSettings()
    hier = build_hierarchy(theta.shape.N, settings.c, settings.max_levels,
                           settings.coarsest_max, h=theta.shape.h)
    return FasSolver(hier, propagate(hier), workers=settings.resolved_workers(),
                     trace_path=settings.trace_path)


def solve_forward(theta: ControlTrajectory, batch: Batch, hyper: Hyperparameters,
                  budget: Budget, warm_start=None, settings: MgritSettings | None = None):
    """Layer-parallel forward propagation.

    Returns ``(StateTrajectory, MgritStatus)``. ``warm_start`` may be a
    :class:`StateTrajectory` or an array of states on the same grid.
    """
    u0 = open_layer(batch.features, theta.W_in)
    solver = _solver_for(
        theta, settings, lambda hier: _forward_propagator(theta, hier, hyper.epsilon_relu))
    init = warm_start.states if isinstance(warm_start, StateTrajectory) else warm_start
    states, status = solver.solve(u0, budget, initial=init)
    return StateTrajectory(states, theta.shape.h), status


def solve_backward(theta: ControlTrajectory, states, batch: Batch, hyper: Hyperparameters,
                   budget: Budget, warm_start=None, settings: MgritSettings | None = None):
    """Layer-parallel adjoint solve on frozen (possibly inexact) states.

    Returns a dict with ``adjoint``, ``grad``, ``loss``, ``regularizer`` and
    ``status``.
    """
    S = states.states if isinstance(states, StateTrajectory) else np.asarray(states)
    loss, seed, d_Wout, d_bout = output_gradients(theta, S[-1], batch)
    solver = _solver_for(
        theta, settings,
        lambda hier: _adjoint_propagator(theta, S, hier, hyper.epsilon_relu))
    init = None
    if warm_start is not None:
        lam = warm_start.costates if isinstance(warm_start, AdjointTrajectory) else warm_start
        init = lam[::-1]
    mu, status = solver.solve(seed, budget, initial=init)
    lams = mu[::-1].copy()
    grad, reg_value = assemble_gradient(theta, S, lams, batch, hyper, d_Wout, d_bout)
    return {
        "adjoint": AdjointTrajectory(lams),
        "grad": grad,
        "loss": loss,
        "regularizer": reg_value,
        "status": status,
    }
