"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_rel_error={self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} entries)")


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-5,
               tolerance: float = 1e-4, name: str = "", max_entries: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Inputs should be float64 for the stated
    tolerances. ``max_entries`` caps how many coordinates per input are probed
    (chosen at random with ``seed``); ``None`` probes all of them.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        probe_out = fn(*inputs)
    weights = rng.standard_normal(probe_out.shape) if probe_out.size > 1 else None

    def scalar(out: Tensor) -> Tensor:
        if weights is None:
            return out.sum()
        return (out * Tensor(weights.astype(out.dtype))).sum()

    for t in inputs:
        t.grad = None
    scalar(fn(*inputs)).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    per_input = []
    n_checked = 0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            if not t.requires_grad:
                per_input.append(0.0)
                continue
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            for k in idx:
                orig = flat[k]
                flat[k] = orig + epsilon
                plus = scalar(fn(*inputs)).item()
                flat[k] = orig - epsilon
                minus = scalar(fn(*inputs)).item()
                flat[k] = orig
                numeric = (plus - minus) / (2 * epsilon)
                worst = max(worst, relative_error(float(grad.reshape(-1)[k]), numeric))
                n_checked += 1
            per_input.append(worst)
    return GradCheckReport(name=name or getattr(fn, "__name__", "fn"),
                           max_rel_error=max(per_input, default=0.0),
                           tolerance=tolerance, n_checked=n_checked, per_input=per_input)
