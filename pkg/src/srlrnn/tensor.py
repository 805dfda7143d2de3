"""Dense numerical kernel: layers with hand-written backward passes.

All arrays are float64 ``numpy.ndarray`` objects. Batches are stored
row-wise, so a dense layer computes ``y = act(x @ W + b)`` with ``x`` of
shape ``(n, fan_in)`` and ``W`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
from scipy.special import expit

Params = Dict[str, np.ndarray]

ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed on ``seed`` and an optional stream path.

    Identical arguments give identical draw sequences on every platform.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(z: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``y = act(z)``)."""
    if activation == "sigmoid":
        return y * (1.0 - y)
    if activation == "tanh":
        return 1.0 - y * y
    if activation == "relu":
        return (z > 0).astype(np.float64)
    if activation == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class DenseCache:
    x: np.ndarray
    W: np.ndarray
    z: np.ndarray
    y: np.ndarray
    activation: str


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "identity"):
    """Affine layer followed by an elementwise activation.

    Returns ``(y, cache)``; the cache feeds :func:`dense_backward`.
    """
    if b.shape != (W.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match weight {W.shape}")
    z = matmul(x, W) + b
    y = activate(z, activation)
    return y, DenseCache(x, W, z, y, activation)


def dense_backward(cache: DenseCache, dy: np.ndarray):
    """Gradients ``(dW, db, dx)`` of a scalar loss given ``dy = dL/dy``."""
    if dy.shape != cache.y.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match layer output {cache.y.shape}")
    dz = dy * activation_grad(cache.z, cache.y, cache.activation)
    dW = cache.x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ cache.W.T
    return dW, db, dx


@dataclass
class LSTMCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_cell_forward(params: Params, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, prefix: str = ""):
    """One step of a standard LSTM cell.

    ``params`` holds ``Wx`` (in, 4H), ``Wh`` (H, 4H) and ``b`` (4H,), gate
    blocks ordered input, forget, output, candidate. Returns ``(h, c, cache)``.
    """
    Wx, Wh, b = params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"]
    H = Wh.shape[0]
    if Wh.shape != (H, 4 * H) or Wx.shape[1] != 4 * H or b.shape != (4 * H,):
        raise ShapeError(f"inconsistent LSTM params Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    if h_prev.shape != c_prev.shape or h_prev.shape[1] != H:
        raise ShapeError(f"state shapes h{h_prev.shape} c{c_prev.shape} do not match hidden size {H}")
    z = matmul(x, Wx) + matmul(h_prev, Wh) + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LSTMCache(x, h_prev, c_prev, i, f, o, g, c, tanh_c)


def lstm_cell_backward(params: Params, cache: LSTMCache, dh: np.ndarray, dc: np.ndarray, prefix: str = ""):
    """Backward through one cell step.

    Returns ``(grads, dx, dh_prev, dc_prev)`` where ``grads`` is keyed like
    ``params`` (with ``prefix``).
    """
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    do = dh * cache.tanh_c
    di = dc_total * cache.g
    df = dc_total * cache.c_prev
    dg = dc_total * cache.i
    dz = np.concatenate([
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        do * cache.o * (1.0 - cache.o),
        dg * (1.0 - cache.g ** 2),
    ], axis=1)
    Wx, Wh = params[prefix + "Wx"], params[prefix + "Wh"]
    grads = {
        prefix + "Wx": cache.x.T @ dz,
        prefix + "Wh": cache.h_prev.T @ dz,
        prefix + "b": dz.sum(axis=0),
    }
    return grads, dz @ Wx.T, dz @ Wh.T, dc_total * cache.f


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def finite_diff_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      epsilon: float = 1e-5) -> float:
    """Maximum elementwise relative error between ``analytic`` and a central difference of ``f`` at ``x``.

    The relative error uses ``max(|a|, |n|, 1e-8)`` as denominator. ``x`` is
    perturbed in place and restored. The difference is formed in the dtype
    ``f`` returns, so passing a ``np.longdouble`` array ``x`` together with
    an ``f`` that keeps that precision lowers the round-off floor.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    analytic = np.asarray(analytic)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} does not match parameters {x.shape}")
    flat = x.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.result_type(x.dtype, np.float64))
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + epsilon
        fp = np.asarray(f(x))[()]
        flat[j] = old - epsilon
        fm = np.asarray(f(x))[()]
        flat[j] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while perturbing entry {j}")
        # the perturbation actually applied, after rounding to x's dtype
        numeric[j] = (fp - fm) / ((old + epsilon) - (old - epsilon))
    a = analytic.reshape(-1).astype(numeric.dtype)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float | None) -> Params:
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def check_finite(arrays: Params, what: str = "array") -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {what} {name!r}")


class Adam:
    """Adam on a parameter dict. ``step`` descends; pass ``ascend=True`` to climb."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params, ascend: bool = False) -> Params:
        self.t += 1
        sign = 1.0 if ascend else -1.0
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
