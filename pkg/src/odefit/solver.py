"""Sequential quadratic programming for sparse equality-constrained NLPs.

Gauss-Newton (or damped-BFGS / exact) Hessian, l1-penalty merit line search
with an optional second-order correction, and KKT-based termination.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .transcription import EvaluationError, NlpProblem


class RankDeficiencyError(RuntimeError):
    """Constraint rows with no Jacobian entries (structurally singular)."""

    def __init__(self, rows):
        super().__init__(
            f"constraint rows {list(rows)} have no Jacobian entries"
        )
        self.rows = list(rows)


class KktFactorizationError(RuntimeError):
    """KKT system remained singular after maximum regularization."""


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-6
    constraint_tol: float = 1e-8
    max_iter: int = 200
    hessian: str = "gauss-newton"  # gauss-newton | exact | damped-bfgs
    regularization: float = 1e-8
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    max_ls_steps: int = 30
    second_order_correction: bool = True

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must be in (0, 1)")
        if self.hessian not in ("gauss-newton", "exact", "damped-bfgs"):
            raise ValueError(f"unknown hessian mode {self.hessian!r}")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    kkt: float
    violation: float
    step_norm: float = np.nan
    alpha: float = np.nan
    penalty: float = np.nan
    soc: bool = False


@dataclass
class SolveResult:
    x: np.ndarray
    lam: np.ndarray
    status: str  # converged | max-iter | line-search-failure | evaluation-error
    fun: float
    kkt: float
    violation: float
    iterations: List[IterationRecord] = field(default_factory=list)
    wall_time: float = 0.0
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def n_iter(self) -> int:
        return len(self.iterations)


def kkt_residual(
    problem: NlpProblem, x: np.ndarray, lam: np.ndarray
) -> Tuple[float, float]:
    """(stationarity, violation) = (||grad f + J^T lam||_inf, ||c||_inf)."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    grad = problem.gradient(x)
    if problem.n_con:
        jac = problem.jacobian(x)
        stat = grad + jac.T @ lam
        viol = problem.constraints(x)
        return float(np.max(np.abs(stat))), float(np.max(np.abs(viol)))
    return float(np.max(np.abs(grad))) if grad.size else 0.0, 0.0


def solve_kkt_step(
    hess,
    jac,
    grad: np.ndarray,
    con: np.ndarray,
    regularization: float = 1e-8,
    max_tries: int = 14,
):
    """Solve [[H + dI, J^T], [J, 0]] [dx; lam] = [-grad; -con].

    The regularization d starts at zero and grows geometrically from the
    given floor whenever factorization fails, the solve is inaccurate, or
    the step shows negative curvature (reduced Hessian not positive
    definite).  Returns (dx, lam, d_used).
    """
    grad = np.asarray(grad, dtype=float)
    con = np.asarray(con, dtype=float)
    n, m = grad.size, con.size
    hess = sp.csr_matrix(hess)
    if m:
        jac = sp.csr_matrix(jac)
        row_counts = np.diff(jac.indptr)
        if np.any(row_counts == 0):
            raise RankDeficiencyError(np.where(row_counts == 0)[0])

    rhs = np.concatenate([-grad, -con])
    scale = max(1.0, float(np.max(np.abs(rhs))))
    delta = 0.0
    eye = sp.identity(n, format="csr")
    for attempt in range(max_tries):
        h_reg = hess + delta * eye if delta else hess
        if m:
            kkt = sp.bmat([[h_reg, jac.T], [jac, None]], format="csc")
        else:
            kkt = h_reg.tocsc()
        try:
            lu = spla.splu(kkt)
            sol = lu.solve(rhs)
        except (RuntimeError, ValueError):
            delta = max(regularization, 10.0 * delta)
            continue
        if not np.all(np.isfinite(sol)):
            delta = max(regularization, 10.0 * delta)
            continue
        resid = np.max(np.abs(kkt @ sol - rhs))
        if resid > 1e-6 * scale:
            delta = max(regularization, 10.0 * delta)
            continue
        dx = sol[:n]
        lam = sol[n:]
        curv = float(dx @ (h_reg @ dx))
        if curv < -1e-10 * max(1.0, float(dx @ dx)):
            delta = max(regularization, 10.0 * delta)
            continue
        return dx, lam, delta
    raise KktFactorizationError(
        f"KKT system singular after {max_tries} regularization increases"
    )


def _get_hessian(problem, options, bfgs_state, x, lam, n):
    mode = options.hessian
    if mode == "damped-bfgs" or (problem.hessian is None):
        return sp.csr_matrix(bfgs_state["B"])
    return sp.csr_matrix(problem.hessian(x, lam))


def _bfgs_update(state, s, y):
    """Powell-damped BFGS update keeping B positive definite."""
    B = state["B"]
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 0.0:
        return
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        phi = 0.8 * sBs / (sBs - sy)
        y = phi * y + (1.0 - phi) * Bs
        sy = float(s @ y)
    if sy <= 1e-16 * sBs:
        return
    state["B"] = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def solve(
    problem: NlpProblem, x0: np.ndarray, options: Optional[SolverOptions] = None
) -> SolveResult:
    """Run the SQP iteration from x0 until the KKT conditions hold.

    Non-finite objective or constraints at a trial point count as a
    line-search rejection (the step is halved); an evaluation error at an
    accepted iterate terminates with status 'evaluation-error'.
    """
    options = options or SolverOptions()
    x = np.array(x0, dtype=float)
    if x.size != problem.n_var:
        raise ValueError(f"x0 has length {x.size}, expected {problem.n_var}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")

    t_start = time.perf_counter()
    lam = np.zeros(problem.n_con)
    penalty = 1.0
    log: List[IterationRecord] = []
    bfgs_state = {"B": np.eye(problem.n_var)}
    reg = options.regularization

    def finish(status, f, kkt, viol, message=""):
        return SolveResult(
            x=x,
            lam=lam,
            status=status,
            fun=f,
            kkt=kkt,
            violation=viol,
            iterations=log,
            wall_time=time.perf_counter() - t_start,
            message=message,
        )

    def eval_full(xv):
        f = problem.objective(xv)
        grad = problem.gradient(xv)
        con = problem.constraints(xv)
        jac = problem.jacobian(xv) if problem.n_con else None
        if not (np.isfinite(f) and np.all(np.isfinite(grad)) and np.all(np.isfinite(con))):
            raise EvaluationError("non-finite objective, gradient or constraints")
        return f, grad, con, jac

    try:
        f, grad, con, jac = eval_full(x)
    except EvaluationError as exc:
        return finish(
            "evaluation-error", np.nan, np.nan, np.nan, f"at start: {exc}"
        )

    status = "max-iter"
    message = ""
    for it in range(options.max_iter):
        if problem.n_con:
            stat = float(np.max(np.abs(grad + jac.T @ lam)))
            viol = float(np.max(np.abs(con)))
        else:
            stat = float(np.max(np.abs(grad))) if grad.size else 0.0
            viol = 0.0
        rec = IterationRecord(
            iteration=it, objective=f, kkt=stat, violation=viol, penalty=penalty
        )
        log.append(rec)
        if stat <= options.kkt_tol and viol <= options.constraint_tol:
            status = "converged"
            break

        hess = _get_hessian(problem, options, bfgs_state, x, lam, problem.n_var)
        try:
            dx, lam_new, delta = solve_kkt_step(
                hess, jac if problem.n_con else None, grad, con, reg
            )
        except RankDeficiencyError:
            raise
        except KktFactorizationError as exc:
            status = "line-search-failure"
            message = str(exc)
            break
        if problem.n_con == 0:
            lam_new = lam

        penalty = max(penalty, 2.0 * float(np.max(np.abs(lam_new))) if lam_new.size else 0.0)
        con_l1 = float(np.sum(np.abs(con)))
        merit0 = f + penalty * con_l1
        descent = float(grad @ dx) - penalty * con_l1
        if descent >= 0.0:
            # quadratic model predicts no merit progress; retry once with a
            # stiffer Hessian before giving up
            reg = max(reg * 100.0, options.regularization)
            if reg > 1e8:
                status = "line-search-failure"
                message = "no descent direction available"
                break
            continue

        alpha = 1.0
        accepted = False
        soc_used = False
        x_new = x
        f_new = f
        con_new = con
        for _ in range(options.max_ls_steps):
            x_try = x + alpha * dx
            try:
                f_try = problem.objective(x_try)
                con_try = problem.constraints(x_try)
                ok = np.isfinite(f_try) and np.all(np.isfinite(con_try))
            except EvaluationError:
                ok = False
            if ok:
                merit_try = f_try + penalty * float(np.sum(np.abs(con_try)))
                if merit_try <= merit0 + options.sufficient_decrease * alpha * descent:
                    x_new, f_new, con_new = x_try, f_try, con_try
                    accepted = True
                    break
                if (
                    alpha == 1.0
                    and options.second_order_correction
                    and problem.n_con
                ):
                    # correct for constraint curvature with the same KKT matrix
                    try:
                        soc_dx, _, _ = solve_kkt_step(
                            hess, jac, np.zeros_like(grad), con_try, max(reg, delta)
                        )
                        x_soc = x_try + soc_dx
                        f_soc = problem.objective(x_soc)
                        con_soc = problem.constraints(x_soc)
                        merit_soc = f_soc + penalty * float(np.sum(np.abs(con_soc)))
                        if (
                            np.isfinite(merit_soc)
                            and merit_soc
                            <= merit0 + options.sufficient_decrease * descent
                        ):
                            x_new, f_new, con_new = x_soc, f_soc, con_soc
                            accepted = True
                            soc_used = True
                            break
                    except (KktFactorizationError, EvaluationError):
                        pass
            alpha *= options.backtrack
        if not accepted:
            reg = max(reg * 100.0, options.regularization)
            if reg > 1e8:
                status = "line-search-failure"
                message = "line search failed at minimum step size"
                break
            continue
        reg = options.regularization

        step = x_new - x
        rec.step_norm = float(np.linalg.norm(step))
        rec.alpha = alpha
        rec.soc = soc_used
        grad_old = grad
        jac_old = jac
        x = x_new
        try:
            f, grad, con, jac = eval_full(x)
        except EvaluationError as exc:
            lam = lam_new
            return finish(
                "evaluation-error",
                f_new,
                np.nan,
                np.nan,
                f"at accepted iterate: {exc}",
            )
        lam = lam_new
        if options.hessian == "damped-bfgs" or problem.hessian is None:
            if problem.n_con:
                y = (grad + jac.T @ lam) - (grad_old + jac_old.T @ lam)
            else:
                y = grad - grad_old
            _bfgs_update(bfgs_state, step, y)

    if status == "converged":
        final = log[-1]
        return finish("converged", final.objective, final.kkt, final.violation)
    if status == "max-iter":
        if problem.n_con:
            stat = float(np.max(np.abs(grad + jac.T @ lam)))
            viol = float(np.max(np.abs(con)))
        else:
            stat = float(np.max(np.abs(grad))) if grad.size else 0.0
            viol = 0.0
        log.append(
            IterationRecord(
                iteration=len(log), objective=f, kkt=stat, violation=viol,
                penalty=penalty,
            )
        )
        return finish("max-iter", f, stat, viol, "iteration limit reached")
    return finish(status, f, log[-1].kkt if log else np.nan,
                  log[-1].violation if log else np.nan, message)
