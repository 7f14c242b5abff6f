"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import record_branches
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    error: float
    checked: int
    skipped: int

    @property
    def skipped_fraction(self) -> float:
        total = self.checked + self.skipped
        return self.skipped / total if total else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / (|a| + |n|)`` over the whole vector; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, index: tuple, h: float = 1e-5,
                     skip_kinks: bool = False) -> float | None:
    """Central difference at one coordinate.

    With ``skip_kinks`` returns None when the two probes land on different
    sides of a Leaky ReLU kink, where the difference quotient is meaningless.
    """
    original = tensor.data[index]
    with no_grad():
        tensor.data[index] = original + h
        with record_branches() as up:
            plus = fn().item()
        tensor.data[index] = original - h
        with record_branches() as down:
            minus = fn().item()
    tensor.data[index] = original
    if skip_kinks and not _same_branches(up, down):
        return None
    return (plus - minus) / (2.0 * h)


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = True,
) -> GradCheckResult:
    """Compare backprop against central differences of scalar ``fn``.

    With ``max_coords`` set, that many coordinates are sampled per tensor.
    Coordinates whose probes cross an activation kink are counted in
    ``skipped`` rather than compared.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    analytic, numeric = [], []
    skipped = 0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            flat = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        for k in flat:
            index = np.unravel_index(k, t.shape)
            value = numeric_gradient(fn, t, index, h, skip_kinks)
            if value is None:
                skipped += 1
                continue
            analytic.append(grad[index])
            numeric.append(value)
    for t in tensors:
        t.grad = None
    return GradCheckResult(relative_error(np.array(analytic), np.array(numeric)), len(analytic), skipped)


def check_gradients(fn, tensors, h=1e-5, max_coords=None, rng=None, skip_kinks=True) -> float:
    """Relative error only; see :func:`gradient_check`."""
    return gradient_check(fn, tensors, h, max_coords, rng, skip_kinks).error
