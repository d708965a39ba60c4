"""Adam with bias correction.

Moment buffers live on each Parameter's ``optimizer_state`` so a model can
be handed between training loops without losing momentum.  A non-finite
gradient aborts the whole step (no partial updates) and names the
offending parameter, since a single NaN would otherwise poison every
moment buffer silently.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Adam", "adam_step"]


def adam_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Apply one Adam update in place to every parameter with a gradient."""
    beta1, beta2 = betas
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        state = p.optimizer_state
        if "m" not in state:
            state["m"] = np.zeros_like(p.tensor.data)
            state["v"] = np.zeros_like(p.tensor.data)
            state["t"] = 0
        state["t"] += 1
        t = state["t"]
        state["m"] = beta1 * state["m"] + (1.0 - beta1) * g
        state["v"] = beta2 * state["v"] + (1.0 - beta2) * (g * g)
        m_hat = state["m"] / (1.0 - beta1**t)
        v_hat = state["v"] / (1.0 - beta2**t)
        p.tensor.data = (p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(
            p.tensor.data.dtype, copy=False
        )


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
