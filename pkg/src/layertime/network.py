"""Discrete ODE residual network: layer propagator, loss, regularizer.

Everything here is local math on numpy arrays. States are stored as
``(s_b, w)`` matrices (one row per sample). The propagator functions also
accept stacked inputs with a leading axis, ``U`` of shape ``(K, s_b, w)``
together with ``W`` of shape ``(K, w, w)`` and ``b`` of shape ``(K, w)``;
the multigrid solver relies on this to advance many layer intervals at once.
A stacked call gives bit-identical slices to the equivalent unstacked calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BlowUpError

DEFAULT_EPS_RELU = 0.1


@dataclass(frozen=True)
class NetworkShape:
    """Sizes of an ODE network on one layer grid."""

    n_f: int
    w: int
    n_c: int
    N: int
    T: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.w < 1 or self.n_f < 1:
            raise ValueError("widths must be >= 1")
        if self.n_c < 2:
            raise ValueError(f"n_c must be >= 2, got {self.n_c}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def h(self) -> float:
        return self.T / self.N

    def with_layers(self, N: int) -> "NetworkShape":
        return replace(self, N=N)


@dataclass(frozen=True)
class Hyperparameters:
    """Training hyperparameters.

    ``opening_scale`` is the half-width of the uniform distribution used for
    the opening and classification layers; ``None`` means ``1/sqrt(w)``.
    """

    w_i: float = 0.0
    gamma_tik: float = 1e-5
    gamma_ddt: float = 0.0
    epsilon_relu: float = DEFAULT_EPS_RELU
    opening_scale: float | None = None

    def __post_init__(self):
        for name in ("w_i", "gamma_tik", "gamma_ddt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.epsilon_relu) and self.epsilon_relu > 0):
            raise ValueError(f"epsilon_relu must be > 0, got {self.epsilon_relu}")
        if self.opening_scale is not None and not self.opening_scale >= 0:
            raise ValueError("opening_scale must be >= 0")


@dataclass(frozen=True)
class Batch:
    """Features and probability-vector labels for a set of samples."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ValueError("features and labels must be 2-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(self.features.shape[0]))
        if self.labels.size:
            if (self.labels < 0).any() or not np.allclose(
                self.labels.sum(axis=1), 1.0, rtol=0, atol=1e-12
            ):
                raise ValueError("label rows must be probability vectors")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class ControlTrajectory:
    """All trainable parameters of the network.

    Internal layers are stored stacked: ``W`` has shape ``(N, w, w)`` and
    ``b`` has shape ``(N, w)``. The same container is used for gradients.
    """

    W_in: np.ndarray
    W: np.ndarray
    b: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    shape: NetworkShape

    def __post_init__(self):
        s = self.shape
        expected = {
            "W_in": (s.w, s.n_f),
            "W": (s.N, s.w, s.w),
            "b": (s.N, s.w),
            "W_out": (s.n_c, s.w),
            "b_out": (s.n_c,),
        }
        for name, shp in expected.items():
            arr = getattr(self, name)
            if arr.shape != shp:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shp}")

    @property
    def layers(self):
        return [{"W": self.W[n], "b": self.b[n]} for n in range(self.shape.N)]

    @classmethod
    def zeros(cls, shape: NetworkShape) -> "ControlTrajectory":
        return cls(
            W_in=np.zeros((shape.w, shape.n_f)),
            W=np.zeros((shape.N, shape.w, shape.w)),
            b=np.zeros((shape.N, shape.w)),
            W_out=np.zeros((shape.n_c, shape.w)),
            b_out=np.zeros(shape.n_c),
            shape=shape,
        )

    def blocks(self):
        """Parameter blocks in serialization order."""
        return (self.W_in, self.W, self.b, self.W_out, self.b_out)

    def flatten(self) -> np.ndarray:
        # per-layer order: W_0, b_0, W_1, b_1, ...
        N, w = self.shape.N, self.shape.w
        layers = np.concatenate(
            [self.W.reshape(N, w * w), self.b], axis=1
        ).ravel()
        return np.concatenate(
            [self.W_in.ravel(), layers, self.W_out.ravel(), self.b_out]
        )

    @classmethod
    def unflatten(cls, vec: np.ndarray, shape: NetworkShape) -> "ControlTrajectory":
        vec = np.asarray(vec, dtype=float)
        n_f, w, n_c, N = shape.n_f, shape.w, shape.n_c, shape.N
        sizes = [w * n_f, N * (w * w + w), n_c * w, n_c]
        if vec.size != sum(sizes):
            raise ValueError(f"vector of length {vec.size}, expected {sum(sizes)}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        layers = parts[1].reshape(N, w * w + w)
        return cls(
            W_in=parts[0].reshape(w, n_f).copy(),
            W=layers[:, : w * w].reshape(N, w, w).copy(),
            b=layers[:, w * w :].copy(),
            W_out=parts[2].reshape(n_c, w).copy(),
            b_out=parts[3].copy(),
            shape=shape,
        )

    def copy(self) -> "ControlTrajectory":
        return ControlTrajectory(
            self.W_in.copy(), self.W.copy(), self.b.copy(),
            self.W_out.copy(), self.b_out.copy(), self.shape,
        )

    def axpy(self, alpha: float, other: "ControlTrajectory") -> "ControlTrajectory":
        """Return ``self + alpha * other`` as a new trajectory."""
        return ControlTrajectory(
            self.W_in + alpha * other.W_in,
            self.W + alpha * other.W,
            self.b + alpha * other.b,
            self.W_out + alpha * other.W_out,
            self.b_out + alpha * other.b_out,
            self.shape,
        )

    def dot(self, other: "ControlTrajectory") -> float:
        return float(self.flatten() @ other.flatten())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.blocks())


# -- activation ---------------------------------------------------------------

def activation(x, eps=DEFAULT_EPS_RELU):
    """Quadratically smoothed ReLU.

    Zero below ``-eps``, identity above ``eps`` and ``(x+eps)^2/(4 eps)`` in
    between, which makes it continuously differentiable.
    """
    x = np.asarray(x, dtype=float)
    # clipping to [-eps, eps] makes the quadratic exactly 0 below the band
    t = np.clip(x, -eps, eps)
    t += eps
    t *= t
    t /= 4.0 * eps
    out = np.where(x >= eps, x, t)
    return out if out.ndim else float(out)


def activation_deriv(x, eps=DEFAULT_EPS_RELU):
    x = np.asarray(x, dtype=float)
    t = np.clip(x, -eps, eps)
    t += eps
    t /= 2.0 * eps
    return t if t.ndim else float(t)


# -- layer propagator -----------------------------------------------------------

def _check_layer(u, W, b):
    if W.shape[-1] != W.shape[-2] or u.shape[-1] != W.shape[-1] or b.shape[-1] != W.shape[-1]:
        raise ValueError(
            f"dimension mismatch: u {u.shape}, W {W.shape}, b {b.shape}"
        )


def preactivation(u, W, b):
    """``W u + b`` for every row of ``u`` (stack-aware)."""
    return u @ np.swapaxes(W, -1, -2) + b[..., None, :] if u.ndim == W.ndim else u @ W.T + b


def layer_step(u, W, b, h, eps=DEFAULT_EPS_RELU):
    """One explicit Euler step ``u + h * sigma(W u + b)``.

    ``u`` may be a single state vector, an ``(s_b, w)`` batch, or a stack
    of batches matching stacked ``W``/``b``.
    """
    u = np.asarray(u, dtype=float)
    _check_layer(u, W, b)
    return u + h * activation(preactivation(u, W, b), eps)


def layer_step_vjp(u, W, b, h, eps, lam):
    """Transposed Jacobian products of :func:`layer_step`.

    Returns ``(du, dW, db)`` with ``du = lam + h W^T (sigma'(z) * lam)``,
    ``dW = h (sigma'(z) * lam) u^T`` and ``db = h sigma'(z) * lam``, where
    ``z = W u + b``. For batched ``u`` the weight gradients are summed over
    the samples.
    """
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    _check_layer(u, W, b)
    if lam.shape != u.shape:
        raise ValueError(f"lam shape {lam.shape} does not match u {u.shape}")
    g = activation_deriv(preactivation(u, W, b), eps) * lam
    du = lam + h * (g @ W)
    if u.ndim == 1:
        return du, h * np.outer(g, u), h * g
    return du, h * (g.T @ u), h * g.sum(axis=0)


def open_layer(y, W_in):
    """Opening map ``u(0) = W_in y``; purely linear. Rows of ``y`` are samples."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != W_in.shape[1]:
        raise ValueError(f"dimension mismatch: y {y.shape}, W_in {W_in.shape}")
    return y @ W_in.T


# -- classification layer --------------------------------------------------------

def logits(uT, W_out, b_out):
    return np.asarray(uT, dtype=float) @ W_out.T + b_out


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(uT, c, W_out, b_out):
    """Softmax cross-entropy of the classification layer and its gradients.

    For a single sample returns the loss and the exact derivatives. For a
    batch (rows of ``uT`` and ``c``) the loss is the batch mean and all
    gradients are those of the mean.

    Returns
    -------
    loss, d_uT, d_Wout, d_bout
    """
    uT = np.asarray(uT, dtype=float)
    c = np.asarray(c, dtype=float)
    single = uT.ndim == 1
    U = uT[None, :] if single else uT
    C = c[None, :] if single else c
    with np.errstate(over="ignore", invalid="ignore"):
        z = logits(U, W_out, b_out)
    if not np.isfinite(z).all():
        raise FloatingPointError("numerical overflow in loss")
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    tot = e.sum(axis=1, keepdims=True)
    logp = zs - np.log(tot)
    s = U.shape[0]
    loss = -float(np.sum(C * logp)) / s
    dz = (e / tot - C) / s
    d_u = dz @ W_out
    d_W = dz.T @ U
    d_b = dz.sum(axis=0)
    if single:
        d_u = d_u[0]
    return loss, d_u, d_W, d_b


# -- regularization --------------------------------------------------------------

def regularizer_and_grad(theta: ControlTrajectory, hyper: Hyperparameters):
    """Tikhonov and time-derivative penalties on the controls.

    Returns ``(value, grad)`` with ``grad`` a :class:`ControlTrajectory`.
    """
    h = theta.shape.h
    gt, gd = hyper.gamma_tik, hyper.gamma_ddt
    W, b = theta.W, theta.b
    value = 0.5 * gt * h * (np.sum(W * W) + np.sum(b * b))
    value += 0.5 * gt * (
        np.sum(theta.W_in ** 2) + np.sum(theta.W_out ** 2) + np.sum(theta.b_out ** 2)
    )
    gW = gt * h * W
    gb = gt * h * b
    if gd > 0 and theta.shape.N > 1:
        dW = np.diff(W, axis=0)
        db = np.diff(b, axis=0)
        value += 0.5 * gd * (np.sum(dW * dW) + np.sum(db * db)) / h
        # d/dθ_n of sum ||θ_{k+1}-θ_k||^2 = 2(θ_n - θ_{n-1}) - 2(θ_{n+1} - θ_n)
        gW[1:] += gd * dW / h
        gW[:-1] -= gd * dW / h
        gb[1:] += gd * db / h
        gb[:-1] -= gd * db / h
    grad = ControlTrajectory(
        gt * theta.W_in, gW, gb, gt * theta.W_out, gt * theta.b_out, theta.shape
    )
    return float(value), grad


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax matches (ties go to the lowest index)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError("row counts differ")
    if predictions.shape[0] == 0:
        raise ValueError("empty evaluation set")
    hit = np.argmax(predictions, axis=1) == np.argmax(labels, axis=1)
    return float(np.count_nonzero(hit)) / predictions.shape[0]


def check_finite(arr, what, layer=None, level=None):
    if not np.isfinite(arr).all():
        where = f" at layer {layer}" if layer is not None else ""
        if level is not None:
            where += f" on level {level}"
        raise BlowUpError(f"{what}{where}", layer=layer, level=level)
