"""Adam optimizer over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: AdamConfig) -> bool:
    """Bias-corrected Adam update, in place.

    Returns False (and leaves params and moments untouched) if any gradient
    contains a non-finite value.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for {name!r}")
        if params[name].data.shape != grads[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        return False

    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += cfg.eps
        np.divide(m, denom, out=denom)
        denom *= cfg.lr / bc1
        p.data -= denom
    return True
