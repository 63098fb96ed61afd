"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def finite_diff_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``fn`` recomputes the output from the current values of ``inputs`` (which
    must be float64 and require grad).  A non-scalar output is reduced with a
    fixed random projection so every output coordinate is exercised.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    proj = rng.standard_normal(out.shape) if out.size > 1 else None

    def scalar(t: Tensor):
        return t if proj is None else (t * Tensor(proj)).sum()

    for x in inputs:
        x.grad = None
    scalar(out).backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    numeric = []
    for x in inputs:
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(scalar(fn()).data.reshape(()))
            flat[i] = orig - eps
            fm = float(scalar(fn()).data.reshape(()))
            flat[i] = orig
            num[i] = (fp - fm) / (2 * eps)
        numeric.append(num)

    # inputs whose true gradient vanishes (e.g. a bias feeding batch norm) are
    # compared against a floor tied to the overall gradient scale
    scale = max(max(float(np.max(np.abs(n))) for n in numeric), 1e-8)
    worst = 0.0
    for num, ga in zip(numeric, analytic):
        ga = ga.reshape(-1)
        denom = max(float(np.max(np.abs(num))), float(np.max(np.abs(ga))), 1e-3 * scale)
        worst = max(worst, float(np.max(np.abs(num - ga))) / denom)
    return worst
