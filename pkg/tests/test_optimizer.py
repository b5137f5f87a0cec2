import numpy as np
import pytest

from conftest import random_batch, random_theta
from layertime.mgrit import Budget, MgritSettings
from layertime.nested import NestedSchedule, init_controls, nested_train
from layertime.network import Batch, Hyperparameters, NetworkShape, softmax
from layertime.optimizer import (
    RECORD_FIELDS,
    WALL_CLOCK_FIELDS,
    LbfgsMemory,
    OptimizerConfig,
    TrainingContext,
    calibrate_work_unit,
    one_shot_step,
    train_level,
    train_non_nested,
)
from layertime.serial import backward_serial, forward_serial, objective

TIGHT = Budget(100, 1e-12)
HYPER = Hyperparameters(gamma_tik=1e-3)


def _setup(rng, N=8, w=3, s=12):
    shape = NetworkShape(2, w, 3, N, 2.0)
    return shape, random_theta(shape, rng, 0.5), random_batch(s, 2, 3, rng)


@pytest.mark.parametrize("kw", [dict(step_init=0), dict(armijo_c=1.0), dict(shrink=1.0),
                                dict(max_backtracks=-1), dict(mode="x"), dict(direction="newton"),
                                dict(lbfgs_memory=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


def test_zero_gradient_step(rng):
    shape, th, _ = _setup(rng)
    y = rng.uniform(-1, 1, (6, 2))
    S = forward_serial(th, Batch(y, np.tile(np.eye(3)[0], (6, 1))), HYPER).states
    batch = Batch(y, softmax(S[-1] @ th.W_out.T + th.b_out))
    step = one_shot_step(th, batch, Budget(2), config=OptimizerConfig(step_init=0.7),
                         hyper=Hyperparameters(gamma_tik=0.0))
    assert step.info["step_size"] == 0.7 and not step.info["stalled"]
    assert np.array_equal(step.theta.flatten(), th.flatten())


def test_backtracking_matches_hand_trace(rng):
    shape, th, batch = _setup(rng)
    cfg = OptimizerConfig(step_init=64.0, serial_line_search=True)
    step = one_shot_step(th, batch, TIGHT, config=cfg, hyper=HYPER)
    # hand trace with the serial objective
    f0 = objective(th, batch, HYPER)
    g = backward_serial(th, forward_serial(th, batch, HYPER), batch, HYPER)["grad"]
    gg = g.dot(g)
    alpha, k = 64.0, 0
    while objective(th.axpy(-alpha, g), batch, HYPER) > f0 - 1e-4 * alpha * gg:
        alpha *= 0.5
        k += 1
    assert k > 0
    assert step.info["step_size"] == alpha and step.info["backtracks"] == k
    assert step.info["objective"] == pytest.approx(objective(th.axpy(-alpha, g), batch, HYPER),
                                                   abs=1e-14)


def test_stall_when_backtracking_exhausted(rng):
    shape, th, batch = _setup(rng)
    cfg = OptimizerConfig(step_init=1e6, max_backtracks=0)
    step = one_shot_step(th, batch, Budget(2), config=cfg, hyper=HYPER)
    assert step.info["stalled"] and step.info["step_size"] == 0.0
    assert np.array_equal(step.theta.flatten(), th.flatten())


def test_gradient_flow_matches_serial_descent(rng):
    shape, th0, batch = _setup(rng, N=8, w=3)
    ctx = TrainingContext(batch, None, HYPER, OptimizerConfig(), MgritSettings(coarsest_max=2))
    theta, _ = train_level(ctx, th0, 10, lambda i: Budget(100, 1e-10))

    th = th0
    for _ in range(10):
        g = backward_serial(th, forward_serial(th, batch, HYPER), batch, HYPER)["grad"]
        f0, gg, alpha = objective(th, batch, HYPER), g.dot(g), 1.0
        while objective(th.axpy(-alpha, g), batch, HYPER) > f0 - 1e-4 * alpha * gg:
            alpha *= 0.5
        th = th.axpy(-alpha, g)
    assert np.max(np.abs(theta.flatten() - th.flatten())) <= 1e-8


@pytest.mark.parametrize("direction", ["steepest", "lbfgs"])
def test_log_allows_armijo_recheck(rng, direction):
    shape, th, batch = _setup(rng, N=8)
    cfg = OptimizerConfig(direction=direction)
    ctx = TrainingContext(batch, batch, HYPER, cfg, MgritSettings(coarsest_max=2))
    train_level(ctx, th, 15, lambda i: Budget(2))
    for r in ctx.log.records:
        assert not r.stalled
        assert r.objective <= r.objective_start - cfg.armijo_c * r.step_size * r.slope
        if direction == "steepest":
            assert r.slope == pytest.approx(r.grad_norm ** 2, rel=1e-12)
        assert r.slope > 0


def test_objective_nonincreasing_with_exact_solves(rng):
    shape, th, batch = _setup(rng, N=8)
    ctx = TrainingContext(batch, batch, HYPER, OptimizerConfig(direction="lbfgs"),
                          MgritSettings(coarsest_max=2))
    train_level(ctx, th, 20, lambda i: Budget(100, 1e-12))
    obj = [r.objective for r in ctx.log.records]
    assert all(not r.stalled for r in ctx.log.records)
    assert all(b <= a + 1e-13 for a, b in zip(obj, obj[1:]))


def test_single_iteration_equals_one_step(rng):
    shape, th, batch = _setup(rng)
    ctx = TrainingContext(batch, None, HYPER, OptimizerConfig(), MgritSettings())
    theta, _ = train_level(ctx, th, 1, lambda i: Budget(2))
    step = one_shot_step(th, batch, Budget(2), config=OptimizerConfig(), hyper=HYPER)
    assert np.array_equal(theta.flatten(), step.theta.flatten())
    assert ctx.log.records[0].objective == step.info["objective"]


def test_non_nested_zero_iterations_returns_init(rng):
    shape, _, batch = _setup(rng)
    theta, log = train_non_nested(shape, 0, HYPER, batch, batch, OptimizerConfig(), 3)
    assert np.array_equal(theta.flatten(), init_controls(shape, HYPER, 3).flatten())
    assert log.records == []


def test_non_nested_logs_level_zero_and_are_deterministic(rng):
    shape, _, batch = _setup(rng, N=16)
    runs = [train_non_nested(shape, 8, HYPER, batch, batch, OptimizerConfig(direction="lbfgs"),
                             4, MgritSettings(coarsest_max=2)) for _ in range(2)]
    (ta, la), (tb, lb) = runs
    assert np.array_equal(ta.flatten(), tb.flatten())
    assert all(r.level == 0 for r in la.records)
    assert [r.iteration for r in la.records] == list(range(8))
    keep = [f for f in RECORD_FIELDS if f not in WALL_CLOCK_FIELDS]
    for ra, rb in zip(la.records, lb.records):
        assert [getattr(ra, f) for f in keep] == [getattr(rb, f) for f in keep]


def _explicit_bfgs(pairs, g):
    s, y = pairs[-1][0], pairs[-1][1]
    H = (s @ y) / (y @ y) * np.eye(g.size)
    for s, y, _ in pairs:
        rho = 1.0 / (s @ y)
        V = np.eye(g.size) - rho * np.outer(y, s)
        H = V.T @ H @ V + rho * np.outer(s, s)
    return H @ g


def test_lbfgs_two_loop_matches_explicit_bfgs():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 6))
    A = A @ A.T + 6 * np.eye(6)
    mem = LbfgsMemory(size=4)
    x = rng.normal(size=6)
    for _ in range(7):
        mem.observe(x.copy(), A @ x)
        x = x - 0.05 * (A @ x) + 0.01 * rng.normal(size=6)
    assert len(mem.pairs) == 4
    g = rng.normal(size=6)
    assert np.allclose(mem.direction(g), _explicit_bfgs(mem.pairs, g), rtol=1e-10, atol=1e-12)
    assert g @ mem.direction(g) > 0


def test_lbfgs_skips_negative_curvature():
    mem = LbfgsMemory()
    mem.observe(np.zeros(2), np.zeros(2))
    mem.observe(np.ones(2), -np.ones(2))
    assert mem.pairs == []
    g = np.array([1.0, -2.0])
    assert np.array_equal(mem.direction(g), g)


def test_calibrate_work_unit(rng):
    shape, _, batch = _setup(rng, N=16)
    spu = calibrate_work_unit(shape, HYPER, batch, OptimizerConfig(), probe_iters=3)
    assert spu > 0
    with pytest.raises(ValueError):
        calibrate_work_unit(shape, HYPER, batch, OptimizerConfig(), probe_iters=2)
    with pytest.raises(ValueError):
        calibrate_work_unit(shape, HYPER, batch, OptimizerConfig(), warmup=-1)


def test_coarse_iterations_cost_less_than_a_unit():
    rng = np.random.default_rng(0)
    shape = NetworkShape(2, 8, 5, 64, 5.0)
    batch = random_batch(500, 2, 5, rng)
    cfg = OptimizerConfig()
    spu = calibrate_work_unit(shape, HYPER, batch, cfg, probe_iters=3)
    sched = NestedSchedule(L=3, N_coarsest=16, m=(6, 1, 1))
    _, log = nested_train(sched, shape, HYPER, batch, None, cfg, 0, seconds_per_unit=spu)
    coarse = [r for r in log.records if r.level == 2][1:]
    per_iter = np.median([r.wall_seconds for r in coarse]) / spu
    assert per_iter < 1.0
