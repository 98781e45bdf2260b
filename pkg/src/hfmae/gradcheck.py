"""Finite-difference gradient checker.

The substitute evidence for training correctness at desk scale: every
backward rule is compared against central differences in 64-bit mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    tol: float
    n_coords: int
    passed: bool
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        worst = f" worst={self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        return (
            f"grad_check {status}: max_rel_error={self.max_rel_error:.3e} "
            f"tol={self.tol:.1e} coords={self.n_coords}{worst}"
        )


def _rel_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric), 1.0)
    return abs(analytic - numeric) / denom


def grad_check(f, params, h=1e-3, tol=1e-4, max_coords=8, rng=None):
    """Compare analytic gradients of scalar-valued ``f`` with central differences.

    ``f`` takes no arguments and reads the leaf tensors in ``params``
    (sequence of (name, Tensor) pairs). Requires 64-bit tensors;
    samples up to ``max_coords`` coordinates per parameter.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step size h={h} outside [1e-5, 1e-2]")
    params = list(params)
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name} is {p.data.dtype}")
        p.grad = None

    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    loss.backward()

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(0.0, None, tol, 0, True)
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst_here = 0.0
        for c in coords:
            idx = np.unravel_index(c, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            with no_grad():
                f_plus = f().item()
            p.data[idx] = orig - h
            with no_grad():
                f_minus = f().item()
            p.data[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite objective at perturbed coordinate {name}[{c}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_error(float(analytic.reshape(-1)[c]), numeric)
            report.n_coords += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(c))
        report.per_param[name] = worst_here
    report.passed = report.max_rel_error <= tol
    return report


def check_op(build, h=1e-3, tol=1e-4, seed=0):
    """Gradcheck a single op. ``build(rng)`` returns (params, closure)."""
    rng = np.random.default_rng(seed)
    params, f = build(rng)
    named = [(f"p{i}", p) for i, p in enumerate(params)]

    def objective():
        for _, p in named:
            p.grad = None
        return f()

    return grad_check(objective, named, h=h, tol=tol, rng=rng)
