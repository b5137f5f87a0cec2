"""Layer-serial forward propagation and discrete adjoint backpropagation.

These are the reference solvers: the multigrid solver must converge to
what they compute, and the coarsest multigrid level uses the same
sequential recurrences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    Batch,
    ControlTrajectory,
    Hyperparameters,
    activation_deriv,
    check_finite,
    layer_step,
    layer_step_vjp,
    logits,
    loss_and_grad,
    open_layer,
    regularizer_and_grad,
)


@dataclass
class StateTrajectory:
    """Network states ``u^0 .. u^N`` stacked into an ``(N+1, s_b, w)`` array."""

    states: np.ndarray
    h: float

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self):
        return self.states.shape[0]


@dataclass
class AdjointTrajectory:
    """Co-states ``lambda^0 .. lambda^N`` as an ``(N+1, s_b, w)`` array."""

    costates: np.ndarray

    def __len__(self):
        return self.costates.shape[0]


def forward_serial(theta: ControlTrajectory, batch: Batch, hyper: Hyperparameters) -> StateTrajectory:
    shape = theta.shape
    h, eps = shape.h, hyper.epsilon_relu
    u = open_layer(batch.features, theta.W_in)
    out = np.empty((shape.N + 1,) + u.shape)
    out[0] = u
    for n in range(shape.N):
        u = layer_step(u, theta.W[n], theta.b[n], h, eps)
        check_finite(u, "forward blow-up", layer=n + 1)
        out[n + 1] = u
    return StateTrajectory(out, h)


def output_gradients(theta: ControlTrajectory, uT, batch: Batch):
    """Mean loss at the final state and the gradient seed for the adjoint."""
    return loss_and_grad(uT, batch.labels, theta.W_out, theta.b_out)


def assemble_gradient(theta, states, costates, batch, hyper, d_Wout, d_bout):
    """Combine co-states into the full parameter gradient.

    Each layer's contribution only needs ``u^n`` and ``lambda^{n+1}``, so
    this step is independent across layers.
    """
    h, eps = theta.shape.h, hyper.epsilon_relu
    U = states[:-1]
    Z = U @ np.swapaxes(theta.W, 1, 2) + theta.b[:, None, :]
    G = activation_deriv(Z, eps) * costates[1:]
    gW = h * (np.swapaxes(G, 1, 2) @ U)
    gb = h * G.sum(axis=1)
    gW_in = costates[0].T @ batch.features
    reg_value, reg = regularizer_and_grad(theta, hyper)
    grad = ControlTrajectory(gW_in, gW, gb, d_Wout, d_bout, theta.shape)
    return grad.axpy(1.0, reg), reg_value


def backward_serial(theta: ControlTrajectory, states: StateTrajectory, batch: Batch,
                    hyper: Hyperparameters):
    """Discrete adjoint of :func:`forward_serial`.

    Returns
    -------
    dict with ``adjoint`` (:class:`AdjointTrajectory`), ``grad``
    (:class:`ControlTrajectory`) and ``loss`` (mean batch loss).
    """
    shape = theta.shape
    h, eps = shape.h, hyper.epsilon_relu
    S = states.states
    loss, lam, d_Wout, d_bout = output_gradients(theta, S[-1], batch)
    lams = np.empty_like(S)
    lams[-1] = lam
    gW = np.empty_like(theta.W)
    gb = np.empty_like(theta.b)
    for n in range(shape.N - 1, -1, -1):
        lam_next = lams[n + 1]
        du, dW, db = layer_step_vjp(S[n], theta.W[n], theta.b[n], h, eps, lam_next)
        check_finite(du, "adjoint blow-up", layer=n)
        lams[n] = du
        gW[n] = dW
        gb[n] = db
    gW_in = lams[0].T @ batch.features
    _, reg = regularizer_and_grad(theta, hyper)
    grad = ControlTrajectory(gW_in, gW, gb, d_Wout, d_bout, shape).axpy(1.0, reg)
    return {"adjoint": AdjointTrajectory(lams), "grad": grad, "loss": loss}


def objective(theta: ControlTrajectory, batch: Batch, hyper: Hyperparameters) -> float:
    """Mean batch loss at the network output plus the regularizer."""
    S = forward_serial(theta, batch, hyper).states
    loss = loss_and_grad(S[-1], batch.labels, theta.W_out, theta.b_out)[0]
    return loss + regularizer_and_grad(theta, hyper)[0]


def predict(theta: ControlTrajectory, features, hyper: Hyperparameters) -> np.ndarray:
    """Class logits for ``features`` via serial propagation."""
    dummy = np.zeros((features.shape[0], theta.shape.n_c))
    dummy[:, 0] = 1.0
    S = forward_serial(theta, Batch(features, dummy), hyper).states
    return logits(S[-1], theta.W_out, theta.b_out)
