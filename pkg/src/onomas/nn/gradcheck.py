from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    analytic: list[np.ndarray] = field(default_factory=list)
    numeric: list[np.ndarray] = field(default_factory=list)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _scalar(fn: Callable[[], Tensor]) -> float:
    val = fn()
    out = float(np.asarray(val.data).reshape(()))
    if not np.isfinite(out):
        raise GradCheckError(f"closure produced a non-finite value: {out}")
    return out


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``fn`` rebuilds the graph from ``inputs`` on every call and returns a
    scalar. Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise GradCheckError("gradient checks need 64-bit inputs")
        t.requires_grad = True
        t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None

    out = fn()
    if not np.isfinite(out.data).all():
        raise GradCheckError("forward pass produced non-finite values")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    if not all(np.isfinite(a).all() for a in analytic):
        raise GradCheckError("analytic gradient is not finite")

    numeric = []
    for t in inputs:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = _scalar(fn)
            flat[i] = orig - epsilon
            f_minus = _scalar(fn)
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * epsilon)
        numeric.append(num)

    per_input = []
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_input.append(float((np.abs(a - n) / denom).max()) if a.size else 0.0)
    return GradCheckReport(max(per_input, default=0.0), per_input, analytic, numeric)
