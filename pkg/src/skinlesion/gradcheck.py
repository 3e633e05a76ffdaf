"""Finite-difference verification of the reverse passes in :mod:`skinlesion.ops`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, seeded_rng


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tolerance: float = 1e-2

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def gradient_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-2,
    h: float = 1e-3,
    wrt: Sequence[int] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``op``'s analytic gradients with central differences.

    Non-scalar outputs are reduced with a fixed random projection ``sum(r *
    out)``. The difference quotient divides by the step actually realised in
    float32 (``fl(x+h) - fl(x-h)``), so piecewise-linear ops match exactly
    away from their kinks. The error for each input is the largest absolute
    deviation divided by the largest gradient magnitude.
    """
    arrays = [np.array(a, dtype=np.float32) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = op(*tensors)
    proj = None
    if out.data.size != 1:
        proj = seeded_rng(seed, "gradcheck").standard_normal(out.shape).astype(np.float32)

    def projected_delta(o_plus: Tensor, o_minus: Tensor) -> float:
        d = o_plus.data.astype(np.float64) - o_minus.data.astype(np.float64)
        return float(d.sum() if proj is None else (d * proj).sum())

    out.backward(None if proj is None else proj)

    errors = []
    for i in wrt:
        analytic = tensors[i].grad.astype(np.float64)
        base = arrays[i]
        numeric = np.zeros(base.shape)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            plus = np.float32(orig + np.float32(h))
            minus = np.float32(orig - np.float32(h))
            flat[idx] = plus
            o_plus = op(*[Tensor(a.copy()) for a in arrays])
            flat[idx] = minus
            o_minus = op(*[Tensor(a.copy()) for a in arrays])
            flat[idx] = orig
            numeric.reshape(-1)[idx] = projected_delta(o_plus, o_minus) / (float(plus) - float(minus))
        errors.append(_relative_error(analytic, numeric))

    return GradCheckReport(max(errors, default=0.0), errors, tolerance)
