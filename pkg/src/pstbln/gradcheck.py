"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STEP = 1e-4
# relative errors are measured against max(|analytic|, |numeric|, FLOOR) so that
# entries which are zero up to rounding do not blow up the ratio
FLOOR = 1e-7


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: dict = field(default_factory=dict)
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.per_input.items())
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}) [{parts}]"


def numeric_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar function ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(loss_fn, inputs: dict, analytic: dict, tolerance: float, step: float = STEP) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the scalar loss reading the arrays in ``inputs``
    (which are perturbed in place); ``analytic`` maps the same keys to the
    gradients computed by the backward pass.
    """
    per_input = {}
    finite = True
    for name, x in inputs.items():
        num = numeric_gradient(loss_fn, x, step)
        ana = analytic[name]
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(ana))):
            finite = False
            per_input[name] = float("inf")
            continue
        per_input[name] = relative_error(ana, num)
    worst = max(per_input.values(), default=0.0)
    return GradCheckReport(worst, tolerance, per_input, finite)
