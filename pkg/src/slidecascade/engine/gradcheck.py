"""Finite-difference verification of analytic gradients.

``finite_diff_check`` compares reverse-mode gradients against central
differences in float64.  Inputs are upcast before either pass runs, since
float32 roundoff at usable step sizes would swamp the comparison.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["finite_diff_check"]


def finite_diff_check(op, inputs, epsilon: float = 1e-4, coords=None, rng=None) -> float:
    """Max relative error between analytic and numerical gradients.

    ``op`` takes one Tensor per entry of ``inputs`` and returns a scalar
    Tensor (non-scalar outputs are summed).  ``coords`` caps how many
    coordinates per input are probed numerically; when set, coordinates
    are chosen by ``rng`` (all coordinates by default).  The error metric
    is |analytic - numerical| / max(|analytic|, |numerical|, 1e-8).
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError(f"epsilon {epsilon} outside [1e-5, 1e-2]")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    leaves = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64), requires_grad=True) for t in inputs]

    def run(tensors) -> Tensor:
        out = op(*tensors)
        if out.data.size != 1:
            out = out.sum()
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("non-finite value in forward pass")
        return out

    out = run(leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for which, leaf in enumerate(leaves):
        flat_indices = np.arange(leaf.data.size)
        if coords is not None and leaf.data.size > coords:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_indices = rng.choice(leaf.data.size, size=coords, replace=False)
        base = leaf.data
        for idx in flat_indices:
            probe = base.reshape(-1).copy()
            probe[idx] += epsilon
            plus = run(_replaced(leaves, which, probe.reshape(base.shape))).item()
            probe[idx] -= 2.0 * epsilon
            minus = run(_replaced(leaves, which, probe.reshape(base.shape))).item()
            numerical = (plus - minus) / (2.0 * epsilon)
            a = float(analytic[which].reshape(-1)[idx])
            err = abs(a - numerical) / max(abs(a), abs(numerical), 1e-8)
            worst = max(worst, err)
    return worst


def _replaced(leaves, which: int, data: np.ndarray) -> list:
    out = [Tensor(leaf.data) for leaf in leaves]
    out[which] = Tensor(data)
    return out
