"""Update rules: Adam, plain SGD, and projection onto the l-infinity ball.

Every rule returns a *descent* update: adding it to the parameter lowers the
loss whose gradient was supplied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Model
from .tensor import ShapeError, Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr: float = 0.01, dtype=np.float32, **kw) -> AdamState:
        shape = tuple(shape)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), lr=lr, **kw)


def adam_step(state: AdamState, g) -> Tensor:
    """Advance ``state`` by one gradient and return the bias-corrected update."""
    g = _arr(g)
    if g.shape != state.m.shape:
        raise ShapeError(f"gradient shape {g.shape} != state shape {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * (g * g)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    update = -state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return Tensor._wrap(update.astype(state.m.dtype, copy=False))


def project_linf(delta, xi: float) -> Tensor:
    """Clamp every entry into [-xi, xi]."""
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    d = _arr(delta)
    lim = d.dtype.type(xi)
    return Tensor._wrap(np.minimum(np.maximum(d, -lim), lim))


def sgd_step(param, g, lr: float) -> Tensor:
    p, g = _arr(param), _arr(g)
    if p.shape != g.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    return Tensor._wrap((p - p.dtype.type(lr) * g).astype(p.dtype, copy=False))


class ModelOptimizer:
    """Applies SGD or Adam to a model's trainable (non-frozen) parameters."""

    def __init__(self, model: Model, kind: str = "adam", lr: float = 1e-3):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {kind!r}")
        self.model = model
        self.kind = kind
        self.lr = lr
        self.states: dict[str, AdamState] = {}

    def step(self) -> None:
        for name in self.model.trainable:
            p = self.model.params[name]
            if p.grad is None:
                continue
            if self.kind == "sgd":
                p.data = sgd_step(p, p.grad, self.lr).data
            else:
                st = self.states.get(name)
                if st is None:
                    st = self.states[name] = AdamState.fresh(p.shape, self.lr, p.dtype)
                p.data = p.data + adam_step(st, p.grad).data

    def zero_grad(self) -> None:
        self.model.zero_grad()
