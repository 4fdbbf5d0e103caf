"""Finite-difference Jacobians and a derivative verification harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .transcription import NlpProblem

#: Default step scales; h_i = scale * max(1, |x_i|).
FORWARD_STEP_SCALE = 1e-7
CENTRAL_STEP_SCALE = 1e-6


def fd_jacobian(
    fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    scheme: str = "central",
    step_scale: Optional[float] = None,
) -> np.ndarray:
    """Finite-difference Jacobian of a vector function at x.

    forward: (f(x + h e_i) - f(x)) / h, central: (f(x + h e_i) -
    f(x - h e_i)) / (2 h), with h_i = step_scale * max(1, |x_i|).
    """
    if scheme not in ("forward", "central"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if step_scale is None:
        step_scale = FORWARD_STEP_SCALE if scheme == "forward" else CENTRAL_STEP_SCALE
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise ValueError("function is not finite at the base point")
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = step_scale * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        fp = np.asarray(fn(xp), dtype=float)
        if scheme == "forward":
            col = (fp - f0) / h
        else:
            xm = x.copy()
            xm[i] -= h
            fm = np.asarray(fn(xm), dtype=float)
            col = (fp - fm) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise ValueError(f"non-finite finite-difference column {i}")
        jac[:, i] = col
    return jac


@dataclass
class DerivativeFailure:
    kind: str  # 'gradient' or 'jacobian'
    row: int
    col: int
    analytic: float
    fd: float
    rel_error: float


@dataclass
class DerivativeReport:
    """Comparison of supplied derivatives against central differences."""

    max_rel_error: float
    threshold: float
    gradient_errors: np.ndarray
    jacobian_errors: np.ndarray
    failures: List[DerivativeFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def to_text(self) -> str:
        lines = [
            f"max relative error {self.max_rel_error:.3e} "
            f"(threshold {self.threshold:.1e}): "
            + ("PASS" if self.passed else "FAIL")
        ]
        if self.failures:
            lines.append(f"{'kind':<10}{'row':>6}{'col':>6}"
                         f"{'analytic':>15}{'fd':>15}{'rel err':>12}")
            for fail in self.failures[:20]:
                lines.append(
                    f"{fail.kind:<10}{fail.row:>6}{fail.col:>6}"
                    f"{fail.analytic:>15.6e}{fail.fd:>15.6e}"
                    f"{fail.rel_error:>12.3e}"
                )
            if len(self.failures) > 20:
                lines.append(f"... {len(self.failures) - 20} more")
        return "\n".join(lines)


def _rel_errors(analytic, fd):
    denom = np.maximum(1.0, np.abs(analytic))
    return np.abs(analytic - fd) / denom


def check_problem_derivatives(
    problem: NlpProblem, xi: np.ndarray, threshold: float = 1e-5
) -> DerivativeReport:
    """Compare the problem's gradient and constraint Jacobian callbacks
    against central differences; entries are judged relative to
    max(1, |entry|)."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("xi must be finite")

    grad_an = np.asarray(problem.gradient(xi), dtype=float)
    grad_fd = fd_jacobian(
        lambda v: np.array([problem.objective(v)]), xi, scheme="central"
    )[0]
    g_err = _rel_errors(grad_an, grad_fd)

    failures: List[DerivativeFailure] = []
    for i in np.where(g_err > threshold)[0]:
        failures.append(
            DerivativeFailure(
                kind="gradient",
                row=0,
                col=int(i),
                analytic=float(grad_an[i]),
                fd=float(grad_fd[i]),
                rel_error=float(g_err[i]),
            )
        )

    if problem.n_con:
        jac_an = problem.jacobian(xi).toarray()
        jac_fd = fd_jacobian(problem.constraints, xi, scheme="central")
        j_err = _rel_errors(jac_an, jac_fd)
        for r, c in zip(*np.where(j_err > threshold)):
            failures.append(
                DerivativeFailure(
                    kind="jacobian",
                    row=int(r),
                    col=int(c),
                    analytic=float(jac_an[r, c]),
                    fd=float(jac_fd[r, c]),
                    rel_error=float(j_err[r, c]),
                )
            )
    else:
        j_err = np.zeros((0, xi.size))

    failures.sort(key=lambda fail: fail.rel_error, reverse=True)
    max_err = float(max(g_err.max() if g_err.size else 0.0,
                        j_err.max() if j_err.size else 0.0))
    return DerivativeReport(
        max_rel_error=max_err,
        threshold=threshold,
        gradient_errors=g_err,
        jacobian_errors=j_err,
        failures=failures,
    )
