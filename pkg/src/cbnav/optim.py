"""Parameter update rules: sgd, rmsprop, adam.

Exact constants (fixed so runs are reproducible and documented):
    adam     beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected
    rmsprop  alpha = 0.99, eps = 1e-8, no momentum
    sgd      plain, no momentum
"""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, ShapeError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8

_KINDS = ("sgd", "rmsprop", "adam")


class OptState:
    """Per-parameter moment buffers, zero-initialized on first use."""

    def __init__(self, kind: str):
        if kind not in _KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.step = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def buffers(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._v:
            self._m[name] = np.zeros(shape, dtype=DTYPE)
            self._v[name] = np.zeros(shape, dtype=DTYPE)
        return self._m[name], self._v[name]


def optimizer_step(
    kind: str,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptState | None,
    lr: float,
) -> OptState:
    """Update `params` in place from `grads`; returns the (new) state.

    Only names present in `grads` are touched, so a caller can freeze
    parameters by omitting their gradients.
    """
    if state is None:
        state = OptState(kind)
    if state.kind != kind:
        raise ValueError(f"state was built for {state.kind!r}, not {kind!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}"
            )
        if kind == "sgd":
            p.data = p.data - DTYPE(lr) * g
        elif kind == "rmsprop":
            _, v = state.buffers(name, g.shape)
            v *= RMSPROP_ALPHA
            v += (1.0 - RMSPROP_ALPHA) * g * g
            p.data = p.data - DTYPE(lr) * g / (np.sqrt(v) + RMSPROP_EPS)
        else:  # adam
            m, v = state.buffers(name, g.shape)
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**t)
            v_hat = v / (1.0 - ADAM_BETA2**t)
            p.data = p.data - DTYPE(lr) * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return state
