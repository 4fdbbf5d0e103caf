"""Transcription of (model, data, mesh, metric) into sparse equality-constrained NLPs.

Three forms are provided: single shooting (parameters only, states by
recursive integration), multiple shooting (segment-initial states added with
continuity constraints) and Lobatto collocation (all mesh states added with
integral-rule defect constraints).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .mesh import CollocationMesh, SegmentGrid, build_mesh
from .model import DynamicalModel, ErrorMetric, ExperimentData, interpolate_input


class EvaluationError(RuntimeError):
    """A model callback returned a non-finite value during evaluation."""

    def __init__(self, message, segment=None, node=None, time=None):
        super().__init__(message)
        self.segment = segment
        self.node = node
        self.time = time


class DivergenceError(EvaluationError):
    """State propagation left the finite range (expected on unstable systems)."""


@dataclass
class DecisionLayout:
    """Index map of the decision vector xi.

    theta always occupies xi[:ntheta].  For collocation, `node_ids[i]` lists
    the global state-node indices of segment i; the shared boundary node of
    adjacent segments resolves to the same index, so exactly one decision
    block represents it.  For multiple shooting, `carried_segments` lists the
    segments whose initial state is a decision block, in storage order.
    """

    kind: str
    n: int
    ntheta: int
    nx: int
    n_state_blocks: int = 0
    node_ids: Optional[List[np.ndarray]] = None
    carried_segments: Optional[np.ndarray] = None

    def theta_indices(self) -> np.ndarray:
        return np.arange(self.ntheta)

    def state_indices(self, block: int) -> np.ndarray:
        """Indices of one state block (a mesh node or a carried segment start)."""
        if block < 0 or block >= self.n_state_blocks:
            raise IndexError(f"state block {block} out of range")
        start = self.ntheta + block * self.nx
        return np.arange(start, start + self.nx)

    def segment_state_indices(self, segment: int) -> np.ndarray:
        """All decision indices holding segment `segment`'s states (collocation)."""
        if self.node_ids is None:
            raise ValueError("layout has no per-segment node table")
        ids = self.node_ids[segment]
        return (self.ntheta + ids[:, None] * self.nx + np.arange(self.nx)).ravel()


@dataclass
class NlpProblem:
    """Sparse equality-constrained NLP: minimize objective s.t. constraints = 0.

    The Jacobian uses a fixed sparsity pattern (jac_rows, jac_cols);
    `jac_values(xi)` returns entries aligned with that pattern.  `hessian`
    (optional) returns a sparse approximation of the Lagrangian Hessian; a
    Gauss-Newton surrogate of the objective qualifies.
    """

    n_var: int
    n_con: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    constraints: Callable[[np.ndarray], np.ndarray]
    jac_rows: np.ndarray
    jac_cols: np.ndarray
    jac_values: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray, np.ndarray], sp.spmatrix]] = None
    info: Dict = field(default_factory=dict)

    def jacobian(self, xi: np.ndarray) -> sp.csr_matrix:
        vals = self.jac_values(xi)
        return sp.coo_matrix(
            (vals, (self.jac_rows, self.jac_cols)), shape=(self.n_con, self.n_var)
        ).tocsr()


def jacobian_sparsity(problem: NlpProblem) -> Tuple[np.ndarray, np.ndarray]:
    """The fixed (rows, cols) constraint-Jacobian pattern of a problem."""
    return problem.jac_rows.copy(), problem.jac_cols.copy()


# ---------------------------------------------------------------------------
# model-callback helpers (finite-difference fallbacks for missing Jacobians)


def _fd_wrt(fn, x, h_scale=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = h_scale * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return jac


class _ModelCalls:
    """Bundles model callbacks with FD fallbacks for absent Jacobians."""

    def __init__(self, model: DynamicalModel):
        self.model = model

    def f(self, x, u, theta):
        return np.asarray(self.model.f(x, u, theta), dtype=float)

    def g(self, x, u, theta):
        return np.asarray(self.model.g(x, u, theta), dtype=float)

    def f_x(self, x, u, theta):
        if self.model.f_x is not None:
            return np.asarray(self.model.f_x(x, u, theta), dtype=float)
        return _fd_wrt(lambda v: self.model.f(v, u, theta), x)

    def f_theta(self, x, u, theta):
        if self.model.f_theta is not None:
            return np.asarray(self.model.f_theta(x, u, theta), dtype=float)
        return _fd_wrt(lambda v: self.model.f(x, u, v), theta)

    def g_x(self, x, u, theta):
        if self.model.g_x is not None:
            return np.asarray(self.model.g_x(x, u, theta), dtype=float)
        return _fd_wrt(lambda v: self.model.g(v, u, theta), x)

    def g_theta(self, x, u, theta):
        if self.model.g_theta is not None:
            return np.asarray(self.model.g_theta(x, u, theta), dtype=float)
        return _fd_wrt(lambda v: self.model.g(x, u, v), theta)

    def x0(self, theta):
        return np.asarray(self.model.x0(theta), dtype=float)

    def x0_theta(self, theta):
        if self.model.x0_theta is not None:
            return np.asarray(self.model.x0_theta(theta), dtype=float)
        return _fd_wrt(lambda v: self.model.x0(v), theta)


# ---------------------------------------------------------------------------
# collocation


class _CollocationEvaluator:
    def __init__(self, model, data, mesh, metric, enforce_initial):
        self.model = model
        self.calls = _ModelCalls(model)
        self.data = data
        self.mesh = mesh
        self.metric = metric
        self.enforce_initial = enforce_initial
        self.nx = model.nx
        self.ntheta = model.ntheta
        self.n_nodes = mesh.n_nodes
        self.n = self.ntheta + self.nx * self.n_nodes
        self.init_rows = self.nx if enforce_initial else 0
        self.n_con = self.init_rows + self.nx * sum(
            int(m_i) - 1 for m_i in mesh.nodes_per_segment
        )

        # inputs at nodes and measurements are fixed by the mesh
        self.u_nodes = np.empty((self.n_nodes, max(model.nu, 1)))
        for gid, t in enumerate(mesh.node_times):
            self.u_nodes[gid, : model.nu] = data.input_at(float(t))[: model.nu]
        self.u_nodes = self.u_nodes[:, : model.nu]
        self.meas_node = mesh.meas_node
        self.u_meas = self.u_nodes[self.meas_node]

        self.f_sup = (
            np.arange(self.ntheta)
            if model.f_param_idx is None
            else np.asarray(model.f_param_idx, dtype=int)
        )
        self.x0_sup = (
            np.arange(self.ntheta)
            if model.x0_param_idx is None
            else np.asarray(model.x0_param_idx, dtype=int)
        )

        self._build_pattern()
        self._cache_key = None
        self._cache: Dict = {}

    # -- pattern ---------------------------------------------------------

    def _state_cols(self, gid):
        return self.ntheta + gid * self.nx + np.arange(self.nx)

    def _build_pattern(self):
        rows, cols = [], []
        self._blocks = []  # (row0, col arrays) bookkeeping for value fill
        r = 0
        if self.enforce_initial:
            block_cols = np.concatenate([self.x0_sup, self._state_cols(0)])
            rr, cc = np.meshgrid(
                np.arange(self.nx), block_cols, indexing="ij"
            )
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            r = self.nx
        for i in range(self.mesh.n_segments):
            ids = self.mesh.node_ids[i]
            m_i = ids.size
            seg_cols = np.concatenate(
                [self.f_sup]
                + [self._state_cols(g) for g in ids]
            )
            n_rows = (m_i - 1) * self.nx
            rr, cc = np.meshgrid(np.arange(r, r + n_rows), seg_cols, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            r += n_rows
        self.jac_rows = np.concatenate(rows)
        self.jac_cols = np.concatenate(cols)

    # -- cached evaluation -----------------------------------------------

    def _slot(self, xi):
        key = xi.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache = {"xi": np.array(xi, dtype=float)}
        return self._cache

    def split(self, xi):
        xi = np.asarray(xi, dtype=float)
        theta = xi[: self.ntheta]
        states = xi[self.ntheta :].reshape(self.n_nodes, self.nx)
        return theta, states

    def _f_all(self, slot):
        if "f_all" not in slot:
            theta, states = self.split(slot["xi"])
            out = np.empty((self.n_nodes, self.nx))
            for gid in range(self.n_nodes):
                out[gid] = self.calls.f(states[gid], self.u_nodes[gid], theta)
            if not np.all(np.isfinite(out)):
                gid = int(np.where(~np.isfinite(out))[0][0])
                seg, node = self.mesh.segment_of_node(gid)
                raise EvaluationError(
                    f"dynamics returned a non-finite value at segment {seg}, "
                    f"node {node} (t={self.mesh.node_times[gid]:.6g})",
                    segment=seg,
                    node=node,
                    time=float(self.mesh.node_times[gid]),
                )
            slot["f_all"] = out
        return slot["f_all"]

    def _outputs(self, slot):
        if "yhat" not in slot:
            theta, states = self.split(slot["xi"])
            yhat = np.empty((self.data.n_samples, self.model.ny))
            for k, gid in enumerate(self.meas_node):
                yhat[k] = self.calls.g(states[gid], self.u_meas[k], theta)
            if not np.all(np.isfinite(yhat)):
                k = int(np.where(~np.isfinite(yhat))[0][0])
                gid = int(self.meas_node[k])
                seg, node = self.mesh.segment_of_node(gid)
                raise EvaluationError(
                    f"output map returned a non-finite value at measurement {k} "
                    f"(segment {seg}, node {node})",
                    segment=seg,
                    node=node,
                    time=float(self.data.times[k]),
                )
            slot["yhat"] = yhat
        return slot["yhat"]

    # -- NLP callbacks -----------------------------------------------------

    def constraints(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, states = self.split(slot["xi"])
        f_all = self._f_all(slot)
        con = np.empty(self.n_con)
        r = 0
        if self.enforce_initial:
            con[: self.nx] = states[0] - self.calls.x0(theta)
            r = self.nx
        for i in range(self.mesh.n_segments):
            ids = self.mesh.node_ids[i]
            c_i = self.mesh.coeffs[i]  # (m_i, m_i-1)
            x_i = states[ids]
            defect = x_i[1:] - x_i[:-1] - c_i.T @ f_all[ids]
            n_rows = defect.size
            con[r : r + n_rows] = defect.ravel()
            r += n_rows
        return con

    def objective(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, _ = self.split(slot["xi"])
        yhat = self._outputs(slot)
        total = 0.0
        for k in range(self.data.n_samples):
            total -= self.metric.value(self.data.z[k] - yhat[k], theta)
        return float(total)

    def gradient(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, states = self.split(slot["xi"])
        yhat = self._outputs(slot)
        grad = np.zeros(self.n)
        for k, gid in enumerate(self.meas_node):
            x = states[gid]
            u = self.u_meas[k]
            eps = self.data.z[k] - yhat[k]
            g_resid, g_theta = self.metric.grad(eps, theta)
            gx = self.calls.g_x(x, u, theta)
            gt = self.calls.g_theta(x, u, theta)
            # objective = -sum ell;  d eps/d state = -g_x, d eps/d theta = -g_theta
            grad[self._state_cols(gid)] += g_resid @ gx
            grad[: self.ntheta] += g_resid @ gt - g_theta
        return grad

    def jac_values(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, states = self.split(slot["xi"])
        vals = []
        if self.enforce_initial:
            block = np.zeros((self.nx, self.x0_sup.size + self.nx))
            block[:, : self.x0_sup.size] = -self.calls.x0_theta(theta)[:, self.x0_sup]
            block[:, self.x0_sup.size :] = np.eye(self.nx)
            vals.append(block.ravel())
        eye = np.eye(self.nx)
        for i in range(self.mesh.n_segments):
            ids = self.mesh.node_ids[i]
            m_i = ids.size
            c_i = self.mesh.coeffs[i]
            fx = [self.calls.f_x(states[g], self.u_nodes[g], theta) for g in ids]
            ft = [
                self.calls.f_theta(states[g], self.u_nodes[g], theta)[:, self.f_sup]
                for g in ids
            ]
            n_rows = (m_i - 1) * self.nx
            n_cols = self.f_sup.size + m_i * self.nx
            block = np.zeros((n_rows, n_cols))
            for k in range(m_i - 1):
                rsl = slice(k * self.nx, (k + 1) * self.nx)
                # theta columns: -sum_j f_theta_j C[j,k]
                acc = np.zeros((self.nx, self.f_sup.size))
                for j in range(m_i):
                    acc += ft[j] * c_i[j, k]
                block[rsl, : self.f_sup.size] = -acc
                for j in range(m_i):
                    csl = slice(
                        self.f_sup.size + j * self.nx,
                        self.f_sup.size + (j + 1) * self.nx,
                    )
                    entry = -fx[j] * c_i[j, k]
                    if j == k:
                        entry = entry - eye
                    elif j == k + 1:
                        entry = entry + eye
                    block[rsl, csl] = entry
            vals.append(block.ravel())
        return np.concatenate(vals)

    def hessian(self, xi, lam):
        """Gauss-Newton surrogate of the objective Hessian (constraint
        curvature dropped; exact for linear dynamics)."""
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, states = self.split(slot["xi"])
        yhat = self._outputs(slot)
        rows, cols, vals = [], [], []
        tcols = np.arange(self.ntheta)
        for k, gid in enumerate(self.meas_node):
            x = states[gid]
            u = self.u_meas[k]
            eps = self.data.z[k] - yhat[k]
            parts = self.metric.gn_parts(eps, theta)
            if parts is None:
                raise ValueError("metric provides no Gauss-Newton structure")
            rho, j_resid, j_theta = parts
            gx = self.calls.g_x(x, u, theta)
            gt = self.calls.g_theta(x, u, theta)
            # d rho/d xi restricted to [theta block, node block]
            jr = np.hstack([j_theta - j_resid @ gt, -j_resid @ gx])
            local = jr.T @ jr
            idx = np.concatenate([tcols, self._state_cols(gid)])
            rr, cc = np.meshgrid(idx, idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(local.ravel())
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n),
        )
        return mat.tocsr()

    def predicted_outputs(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        return self._outputs(slot).copy()


def collocation_transcribe(
    model: DynamicalModel,
    data: ExperimentData,
    mesh: CollocationMesh,
    metric: ErrorMetric,
    enforce_initial: Optional[bool] = None,
) -> Tuple[NlpProblem, DecisionLayout]:
    """Transcribe the estimation problem in Lobatto collocation form.

    The objective is the negative sum of per-sample metric values at the
    measurement nodes; the constraints are the integral-rule defects on all
    mesh sub-intervals, preceded by the initial-state equation when the
    model supplies an initial-state map (or when `enforce_initial` says so).
    """
    if mesh.meas_node is None:
        raise ValueError("mesh was built without measurement alignment data")
    if data.ny != model.ny:
        raise ValueError(
            f"data has {data.ny} channels but the model outputs {model.ny}"
        )
    if enforce_initial is None:
        enforce_initial = model.x0 is not None
    if enforce_initial and model.x0 is None:
        raise ValueError("enforce_initial requires a model initial-state map")

    ev = _CollocationEvaluator(model, data, mesh, metric, enforce_initial)
    layout = DecisionLayout(
        kind="collocation",
        n=ev.n,
        ntheta=model.ntheta,
        nx=model.nx,
        n_state_blocks=mesh.n_nodes,
        node_ids=[ids.copy() for ids in mesh.node_ids],
    )
    problem = NlpProblem(
        n_var=ev.n,
        n_con=ev.n_con,
        objective=ev.objective,
        gradient=ev.gradient,
        constraints=ev.constraints,
        jac_rows=ev.jac_rows,
        jac_cols=ev.jac_cols,
        jac_values=ev.jac_values,
        hessian=ev.hessian if metric.gn_parts(np.zeros(model.ny), _probe_theta(model, metric)) is not None else None,
        info={
            "kind": "collocation",
            "defect_offset": ev.init_rows,
            "predicted_outputs": ev.predicted_outputs,
            "layout": None,  # filled below
        },
    )
    problem.info["layout"] = layout
    return problem, layout


def _probe_theta(model, metric):
    """Finite placeholder parameters for probing metric capabilities."""
    return np.zeros(model.ntheta)


def eval_defects(problem: NlpProblem, xi: np.ndarray) -> np.ndarray:
    """Defect rows of a collocation problem's constraints (initial block excluded)."""
    off = problem.info.get("defect_offset")
    if off is None:
        raise ValueError("problem does not carry collocation defect information")
    return problem.constraints(xi)[off:]


# ---------------------------------------------------------------------------
# integration steps for the shooting transcriptions


def euler_step(f, x, t0, t1, u_of_t, theta):
    h = t1 - t0
    return x + h * np.asarray(f(x, u_of_t(t0), theta), dtype=float)


def rk4_step(f, x, t0, t1, u_of_t, theta):
    h = t1 - t0
    tm = 0.5 * (t0 + t1)
    u0, um, u1 = u_of_t(t0), u_of_t(tm), u_of_t(t1)
    k1 = np.asarray(f(x, u0, theta), dtype=float)
    k2 = np.asarray(f(x + 0.5 * h * k1, um, theta), dtype=float)
    k3 = np.asarray(f(x + 0.5 * h * k2, um, theta), dtype=float)
    k4 = np.asarray(f(x + h * k3, u1, theta), dtype=float)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


class _Propagator:
    """Fixed-mesh state propagation with precomputed input samples."""

    def __init__(self, model, data, times):
        self.model = model
        self.calls = _ModelCalls(model)
        self.times = np.asarray(times, dtype=float)
        # inputs at nodes and at midpoints (RK4 stages); the mesh is fixed
        self._u = {}
        for t in self.times:
            self._u[float(t)] = data.input_at(float(t))
        for a, b in zip(self.times[:-1], self.times[1:]):
            tm = 0.5 * (a + b)
            self._u[float(tm)] = data.input_at(float(tm))

    def u_of_t(self, t):
        return self._u[float(t)]

    def run(self, stepper, x_init, theta, record_at=None):
        """Propagate from times[0]; returns states at `record_at` node indices
        plus the final state.  Raises DivergenceError on non-finite states."""
        x = np.asarray(x_init, dtype=float)
        record = {} if record_at is None else {int(i): None for i in record_at}
        if 0 in record:
            record[0] = x.copy()
        for k in range(self.times.size - 1):
            x = stepper(
                self.model.f, x, self.times[k], self.times[k + 1], self.u_of_t, theta
            )
            if not np.all(np.isfinite(x)):
                raise DivergenceError(
                    f"state diverged at t={self.times[k + 1]:.6g}",
                    time=float(self.times[k + 1]),
                )
            if (k + 1) in record:
                record[k + 1] = x.copy()
        return record, x


# ---------------------------------------------------------------------------
# single shooting


class _SingleShootEvaluator:
    def __init__(self, model, data, integrator, mesh, metric):
        self.model = model
        self.calls = _ModelCalls(model)
        self.data = data
        self.metric = metric
        self.stepper = _STEPPERS[integrator]
        self.n = model.ntheta
        self.node_times = mesh.node_times
        self.meas_node = mesh.meas_node
        self.prop = _Propagator(model, data, mesh.node_times)
        self.u_meas = np.array([data.input_at(float(t)) for t in data.times])
        self._cache_key = None
        self._cache = {}

    def _slot(self, theta):
        key = theta.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache = {"theta": np.array(theta, dtype=float)}
        return self._cache

    def _predict(self, slot):
        if "yhat" not in slot:
            theta = slot["theta"]
            x_init = self.calls.x0(theta)
            record, _ = self.prop.run(
                self.stepper, x_init, theta, record_at=self.meas_node
            )
            yhat = np.empty((self.data.n_samples, self.model.ny))
            for k, gid in enumerate(self.meas_node):
                yhat[k] = self.calls.g(record[int(gid)], self.u_meas[k], theta)
            if not np.all(np.isfinite(yhat)):
                raise EvaluationError("output map returned a non-finite value")
            slot["yhat"] = yhat
        return slot["yhat"]

    def objective(self, theta):
        theta = np.asarray(theta, dtype=float)
        slot = self._slot(theta)
        yhat = self._predict(slot)
        total = 0.0
        for k in range(self.data.n_samples):
            total -= self.metric.value(self.data.z[k] - yhat[k], theta)
        return float(total)

    def _rho_stack(self, theta):
        """Stacked whitened residuals (Gauss-Newton metrics only)."""
        slot = self._slot(np.asarray(theta, dtype=float))
        yhat = self._predict(slot)
        out = np.empty(self.data.n_samples * self.model.ny)
        for k in range(self.data.n_samples):
            parts = self.metric.gn_parts(self.data.z[k] - yhat[k], theta)
            out[k * self.model.ny : (k + 1) * self.model.ny] = parts[0]
        return out

    def _rho_jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        jac = np.empty((self.data.n_samples * self.model.ny, self.n))
        for i in range(self.n):
            h = 1e-6 * max(1.0, abs(theta[i]))
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            jac[:, i] = (self._rho_stack(tp) - self._rho_stack(tm)) / (2.0 * h)
        return jac

    def _direct_grad(self, theta):
        """Gradient of the non-quadratic metric part (e.g. sum log sigma terms)."""
        slot = self._slot(np.asarray(theta, dtype=float))
        yhat = self._predict(slot)
        grad = np.zeros(self.n)
        for k in range(self.data.n_samples):
            eps = self.data.z[k] - yhat[k]
            rho, _, _ = self.metric.gn_parts(eps, theta)
            _, g_theta = self.metric.grad(eps, theta)
            # -ell = 1/2 rho^2 + n(theta); remove the quadratic part's direct
            # theta-gradient (held by rho's FD Jacobian) to keep only grad n.
            parts = self.metric.gn_parts(eps, theta)
            grad += -(g_theta) - parts[2].T @ rho
        return grad

    def gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.metric.gn_parts(np.zeros(self.model.ny), theta) is None:
            # generic metric: central differences of the objective
            grad = np.empty(self.n)
            for i in range(self.n):
                h = 1e-6 * max(1.0, abs(theta[i]))
                tp, tm = theta.copy(), theta.copy()
                tp[i] += h
                tm[i] -= h
                grad[i] = (self.objective(tp) - self.objective(tm)) / (2.0 * h)
            return grad
        rho = self._rho_stack(theta)
        jac = self._rho_jacobian(theta)
        slot = self._slot(theta)
        self._cache["rho_jac"] = jac
        return jac.T @ rho + self._direct_grad(theta)

    def hessian(self, theta, lam):
        theta = np.asarray(theta, dtype=float)
        slot = self._slot(theta)
        jac = self._cache.get("rho_jac")
        if jac is None or self._cache_key != theta.tobytes():
            jac = self._rho_jacobian(theta)
        return sp.csr_matrix(jac.T @ jac)

    def constraints(self, theta):
        return np.zeros(0)

    def jac_values(self, theta):
        return np.zeros(0)

    def predicted_outputs(self, theta):
        slot = self._slot(np.asarray(theta, dtype=float))
        return self._predict(slot).copy()


def single_shoot_transcribe(
    model: DynamicalModel,
    data: ExperimentData,
    integrator: str,
    mesh: CollocationMesh,
    metric: ErrorMetric,
) -> NlpProblem:
    """Transcribe in single-shooting form: theta only, no constraints.

    States come from recursive fixed-step integration over the mesh nodes;
    a non-finite state raises DivergenceError reporting the time reached.
    """
    if integrator not in _STEPPERS:
        raise ValueError(f"unknown integrator {integrator!r}; use 'rk4' or 'euler'")
    if model.x0 is None:
        raise ValueError("single shooting requires a model initial-state map")
    if mesh.meas_node is None:
        raise ValueError("mesh was built without measurement alignment data")
    ev = _SingleShootEvaluator(model, data, integrator, mesh, metric)
    has_gn = metric.gn_parts(np.zeros(model.ny), np.zeros(model.ntheta)) is not None
    return NlpProblem(
        n_var=ev.n,
        n_con=0,
        objective=ev.objective,
        gradient=ev.gradient,
        constraints=ev.constraints,
        jac_rows=np.zeros(0, dtype=int),
        jac_cols=np.zeros(0, dtype=int),
        jac_values=ev.jac_values,
        hessian=ev.hessian if has_gn else None,
        info={
            "kind": "single-shooting",
            "predicted_outputs": ev.predicted_outputs,
        },
    )


# ---------------------------------------------------------------------------
# multiple shooting


class _MultipleShootEvaluator:
    def __init__(self, model, data, integrator, grid, metric):
        self.model = model
        self.calls = _ModelCalls(model)
        self.data = data
        self.metric = metric
        self.stepper = _STEPPERS[integrator]
        self.grid = grid
        self.nx = model.nx
        self.ntheta = model.ntheta
        ns = grid.n_segments

        # segment node times: measurement times within each segment plus its
        # boundaries (the integration mesh must include measurement times)
        tol = 1e-9 * grid.span
        self.seg_times = []
        self.seg_meas = []  # measurement indices per segment
        self.seg_meas_local = []  # node index within segment for each measurement
        claimed = np.zeros(data.n_samples, dtype=bool)
        for i in range(ns):
            a, b = grid.boundaries[i], grid.boundaries[i + 1]
            inside = np.where(
                (data.times >= a - tol) & (data.times <= b + tol) & ~claimed
            )[0]
            claimed[inside] = True
            times = np.unique(np.concatenate([[a, b], data.times[inside]]))
            # merge near-duplicates against the boundaries
            keep = [times[0]]
            for t in times[1:]:
                if t - keep[-1] > tol:
                    keep.append(t)
            times = np.asarray(keep)
            times[0], times[-1] = a, b
            self.seg_times.append(times)
            local = np.searchsorted(times, data.times[inside])
            local = np.clip(local, 0, times.size - 1)
            for w, k in enumerate(inside):
                cand = [local[w] - 1, local[w], local[w] + 1]
                best = min(
                    (c for c in cand if 0 <= c < times.size),
                    key=lambda c: abs(times[c] - data.times[k]),
                )
                local[w] = best
            self.seg_meas.append(inside)
            self.seg_meas_local.append(local)
        if not np.all(claimed):
            raise ValueError("some measurement times fall outside the grid")

        self.carried = []  # segment indices whose initial state is a variable
        if model.x0 is None:
            self.carried.append(0)
        self.carried.extend(range(1, ns))
        self.carried = np.asarray(self.carried, dtype=int)
        self.block_of_segment = {int(s): b for b, s in enumerate(self.carried)}
        self.n = self.ntheta + self.nx * self.carried.size
        self.n_con = self.nx * (ns - 1)

        self.props = [
            _Propagator(model, data, self.seg_times[i]) for i in range(ns)
        ]
        self.u_meas = np.array([data.input_at(float(t)) for t in data.times])
        self._build_pattern()
        self._cache_key = None
        self._cache = {}

    def _state_cols(self, block):
        return self.ntheta + block * self.nx + np.arange(self.nx)

    def _build_pattern(self):
        rows, cols = [], []
        for i in range(self.grid.n_segments - 1):
            block_cols = [np.arange(self.ntheta)]
            if int(i) in self.block_of_segment:
                block_cols.append(self._state_cols(self.block_of_segment[i]))
            block_cols.append(self._state_cols(self.block_of_segment[i + 1]))
            all_cols = np.concatenate(block_cols)
            rr, cc = np.meshgrid(
                i * self.nx + np.arange(self.nx), all_cols, indexing="ij"
            )
            rows.append(rr.ravel())
            cols.append(cc.ravel())
        self.jac_rows = (
            np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        )
        self.jac_cols = (
            np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        )

    def split(self, xi):
        xi = np.asarray(xi, dtype=float)
        theta = xi[: self.ntheta]
        blocks = xi[self.ntheta :].reshape(self.carried.size, self.nx)
        return theta, blocks

    def _segment_start(self, i, theta, blocks):
        if int(i) in self.block_of_segment:
            return blocks[self.block_of_segment[int(i)]]
        return self.calls.x0(theta)

    def _propagate_segment(self, i, theta, x_init):
        try:
            record, x_end = self.props[i].run(
                self.stepper,
                x_init,
                theta,
                record_at=self.seg_meas_local[i],
            )
        except DivergenceError as exc:
            raise DivergenceError(
                f"segment {i}: {exc}", segment=i, time=exc.time
            ) from exc
        yhat = np.empty((self.seg_meas[i].size, self.model.ny))
        for w, k in enumerate(self.seg_meas[i]):
            node = int(self.seg_meas_local[i][w])
            yhat[w] = self.calls.g(record[node], self.u_meas[k], theta)
        return yhat, x_end

    def _slot(self, xi):
        key = xi.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache = {"xi": np.array(xi, dtype=float)}
        return self._cache

    def _forward(self, slot):
        if "yhat" not in slot:
            theta, blocks = self.split(slot["xi"])
            yhat = np.empty((self.data.n_samples, self.model.ny))
            ends = np.empty((self.grid.n_segments, self.nx))
            for i in range(self.grid.n_segments):
                x_init = self._segment_start(i, theta, blocks)
                y_i, x_end = self._propagate_segment(i, theta, x_init)
                yhat[self.seg_meas[i]] = y_i
                ends[i] = x_end
            slot["yhat"] = yhat
            slot["ends"] = ends
        return slot["yhat"], slot["ends"]

    def objective(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, _ = self.split(slot["xi"])
        yhat, _ = self._forward(slot)
        total = 0.0
        for k in range(self.data.n_samples):
            total -= self.metric.value(self.data.z[k] - yhat[k], theta)
        return float(total)

    def constraints(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, blocks = self.split(slot["xi"])
        _, ends = self._forward(slot)
        con = np.empty(self.n_con)
        for i in range(self.grid.n_segments - 1):
            nxt = blocks[self.block_of_segment[i + 1]]
            con[i * self.nx : (i + 1) * self.nx] = ends[i] - nxt
        return con

    def _segment_sensitivities(self, slot):
        """Central-difference sensitivities of (yhat_i, x_end_i) per segment
        with respect to [theta, x_init_i]."""
        if "sens" in slot:
            return slot["sens"]
        theta, blocks = self.split(slot["xi"])
        sens = []
        for i in range(self.grid.n_segments):
            x_init = np.asarray(self._segment_start(i, theta, blocks), dtype=float)
            p = np.concatenate([theta, x_init])
            ny_i = self.seg_meas[i].size * self.model.ny

            def seg_map(pv, i=i):
                th = pv[: self.ntheta]
                xin = pv[self.ntheta :]
                yh, xe = self._propagate_segment(i, th, xin)
                return np.concatenate([yh.ravel(), xe])

            jac = np.empty((ny_i + self.nx, p.size))
            for c in range(p.size):
                h = 1e-6 * max(1.0, abs(p[c]))
                pp, pm = p.copy(), p.copy()
                pp[c] += h
                pm[c] -= h
                jac[:, c] = (seg_map(pp) - seg_map(pm)) / (2.0 * h)
            sens.append((jac[:ny_i].reshape(self.seg_meas[i].size, self.model.ny, p.size), jac[ny_i:]))
        slot["sens"] = sens
        return sens

    def _x0_jac(self, theta):
        if self.model.x0 is None:
            return None
        return self.calls.x0_theta(theta)

    def gradient(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, blocks = self.split(slot["xi"])
        yhat, _ = self._forward(slot)
        sens = self._segment_sensitivities(slot)
        grad = np.zeros(self.n)
        x0_jac = self._x0_jac(theta)
        for i in range(self.grid.n_segments):
            y_sens, _ = sens[i]
            for w, k in enumerate(self.seg_meas[i]):
                eps = self.data.z[k] - yhat[k]
                g_resid, g_theta = self.metric.grad(eps, theta)
                dy_dp = y_sens[w]  # (ny, ntheta + nx)
                contrib = g_resid @ dy_dp  # d obj/d p  (= +g_resid dy/dp)
                grad[: self.ntheta] += contrib[: self.ntheta] - g_theta
                if int(i) in self.block_of_segment:
                    grad[self._state_cols(self.block_of_segment[i])] += contrib[
                        self.ntheta :
                    ]
                elif x0_jac is not None:
                    grad[: self.ntheta] += contrib[self.ntheta :] @ x0_jac
        return grad

    def jac_values(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, blocks = self.split(slot["xi"])
        sens = self._segment_sensitivities(slot)
        x0_jac = self._x0_jac(theta)
        vals = []
        for i in range(self.grid.n_segments - 1):
            _, e_sens = sens[i]  # (nx, ntheta + nx)
            d_theta = e_sens[:, : self.ntheta].copy()
            d_init = e_sens[:, self.ntheta :]
            if int(i) not in self.block_of_segment and x0_jac is not None:
                d_theta += d_init @ x0_jac
            block = [d_theta]
            if int(i) in self.block_of_segment:
                block.append(d_init)
            block.append(-np.eye(self.nx))
            vals.append(np.hstack(block).ravel())
        return np.concatenate(vals) if vals else np.zeros(0)

    def hessian(self, xi, lam):
        slot = self._slot(np.asarray(xi, dtype=float))
        theta, blocks = self.split(slot["xi"])
        yhat, _ = self._forward(slot)
        sens = self._segment_sensitivities(slot)
        x0_jac = self._x0_jac(theta)
        h = np.zeros((self.n, self.n))
        for i in range(self.grid.n_segments):
            y_sens, _ = sens[i]
            cols = [np.arange(self.ntheta)]
            if int(i) in self.block_of_segment:
                cols.append(self._state_cols(self.block_of_segment[i]))
            idx = np.concatenate(cols)
            for w, k in enumerate(self.seg_meas[i]):
                eps = self.data.z[k] - yhat[k]
                parts = self.metric.gn_parts(eps, theta)
                if parts is None:
                    raise ValueError("metric provides no Gauss-Newton structure")
                rho, j_resid, j_theta = parts
                dy_dp = y_sens[w]
                if int(i) in self.block_of_segment:
                    dy_dxi = dy_dp
                else:
                    dy_dxi = dy_dp[:, : self.ntheta].copy()
                    if x0_jac is not None:
                        dy_dxi += dy_dp[:, self.ntheta :] @ x0_jac
                jr = np.hstack(
                    [j_theta[:, : self.ntheta], np.zeros((self.model.ny, idx.size - self.ntheta))]
                )
                jr -= j_resid @ dy_dxi
                h[np.ix_(idx, idx)] += jr.T @ jr
        return sp.csr_matrix(h)

    def predicted_outputs(self, xi):
        slot = self._slot(np.asarray(xi, dtype=float))
        yhat, _ = self._forward(slot)
        return yhat.copy()


def multiple_shoot_transcribe(
    model: DynamicalModel,
    data: ExperimentData,
    integrator: str,
    grid: SegmentGrid,
    metric: ErrorMetric,
) -> Tuple[NlpProblem, DecisionLayout]:
    """Transcribe in multiple-shooting form.

    Decision vector: theta plus the initial state of every segment after the
    first (plus the first segment's when the model has no initial-state map).
    Constraints: ns-1 continuity blocks, end state of segment i minus the
    initial state of segment i+1.
    """
    if integrator not in _STEPPERS:
        raise ValueError(f"unknown integrator {integrator!r}; use 'rk4' or 'euler'")
    ev = _MultipleShootEvaluator(model, data, integrator, grid, metric)
    has_gn = metric.gn_parts(np.zeros(model.ny), np.zeros(model.ntheta)) is not None
    layout = DecisionLayout(
        kind="multiple-shooting",
        n=ev.n,
        ntheta=model.ntheta,
        nx=model.nx,
        n_state_blocks=ev.carried.size,
        carried_segments=ev.carried.copy(),
    )
    problem = NlpProblem(
        n_var=ev.n,
        n_con=ev.n_con,
        objective=ev.objective,
        gradient=ev.gradient,
        constraints=ev.constraints,
        jac_rows=ev.jac_rows,
        jac_cols=ev.jac_cols,
        jac_values=ev.jac_values,
        hessian=ev.hessian if has_gn else None,
        info={
            "kind": "multiple-shooting",
            "predicted_outputs": ev.predicted_outputs,
            "layout": layout,
            "segment_times": [t.copy() for t in ev.seg_times],
        },
    )
    return problem, layout


# ---------------------------------------------------------------------------
# initial guess


def initial_guess(
    layout: DecisionLayout,
    data: ExperimentData,
    theta0: np.ndarray,
    state_channel_map: Optional[Dict[int, int]] = None,
    mesh: Optional[CollocationMesh] = None,
    grid: Optional[SegmentGrid] = None,
) -> np.ndarray:
    """Build xi0: theta block from theta0, measured states interpolated onto
    the state blocks, unmeasured states zero."""
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.size != layout.ntheta:
        raise ValueError("theta0 length does not match the layout")
    xi0 = np.zeros(layout.n)
    xi0[: layout.ntheta] = theta0
    state_channel_map = state_channel_map or {}

    if layout.kind == "single-shooting" or layout.n_state_blocks == 0:
        return xi0

    if layout.kind == "collocation":
        if mesh is None:
            raise ValueError("collocation initial guess needs the mesh")
        block_times = mesh.node_times
    elif layout.kind == "multiple-shooting":
        if grid is None:
            raise ValueError("multiple-shooting initial guess needs the grid")
        block_times = grid.boundaries[layout.carried_segments]
    else:
        raise ValueError(f"unknown layout kind {layout.kind!r}")

    for state, col in state_channel_map.items():
        vals = np.interp(block_times, data.times, data.z[:, col])
        for b in range(layout.n_state_blocks):
            xi0[layout.state_indices(b)[state]] = vals[b]
    return xi0
