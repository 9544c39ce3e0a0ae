from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update on raw arrays; advances ``state`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"adam: {len(grads)} grads for {len(params)} params")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"adam: grad shape {np.shape(g)} vs param shape {np.shape(p)}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        out.append(p - lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + eps))
    return out


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"adam: {len(grads)} grads for {len(self.params)} params")
        updated = adam_step([p.data for p in self.params], grads, self.state,
                            self.lr if lr is None else lr, *self.betas, self.eps)
        for p, new in zip(self.params, updated):
            p.data = new
