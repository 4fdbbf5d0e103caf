"""Model abstraction, experiment data containers and error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_diag_loglike(residual: np.ndarray, sigma: np.ndarray) -> float:
    """Log-density of a zero-mean Gaussian with independent channels.

    Equals -1/2 sum((residual/sigma)^2) - sum(log sigma) - ny/2 log(2 pi).
    """
    residual = np.asarray(residual, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if residual.shape != sigma.shape:
        raise ValueError(
            f"residual shape {residual.shape} != sigma shape {sigma.shape}"
        )
    if np.any(sigma <= 0.0) or not np.all(np.isfinite(sigma)):
        raise ValueError("standard deviations must be positive and finite")
    r = residual / sigma
    return float(
        -0.5 * np.dot(r, r) - np.sum(np.log(sigma)) - 0.5 * residual.size * LOG_2PI
    )


def gaussian_full_loglike(residual: np.ndarray, cov: np.ndarray) -> float:
    """Log-density of a zero-mean Gaussian with full covariance `cov`.

    `cov` must be symmetric positive definite; a Cholesky failure raises
    ValueError.
    """
    residual = np.asarray(residual, dtype=float)
    cov = np.asarray(cov, dtype=float)
    ny = residual.size
    if cov.shape != (ny, ny):
        raise ValueError(f"covariance shape {cov.shape} incompatible with ny={ny}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance matrix is not positive definite") from exc
    w = np.linalg.solve(chol, residual)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * np.dot(w, w) - 0.5 * logdet - 0.5 * ny * LOG_2PI)


def interpolate_input(times: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    """Piecewise-linear interpolation of a sampled input signal at time t.

    At a sample time the sample is returned exactly; t outside the sampled
    range raises ValueError.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    span = times[-1] - times[0]
    slack = 1e-12 * max(abs(span), 1.0)
    if t < times[0] - slack or t > times[-1] + slack:
        raise ValueError(
            f"input requested at t={t}, outside sampled range "
            f"[{times[0]}, {times[-1]}]"
        )
    t = min(max(t, times[0]), times[-1])
    idx = np.searchsorted(times, t)
    if idx < times.size and times[idx] == t:
        return values[idx].copy()
    lo = idx - 1
    w = (t - times[lo]) / (times[idx] - times[lo])
    return (1.0 - w) * values[lo] + w * values[idx]


def interpolate_input_many(
    times: np.ndarray, values: np.ndarray, ts: np.ndarray
) -> np.ndarray:
    """Vectorized `interpolate_input` for an array of query times."""
    ts = np.asarray(ts, dtype=float)
    out = np.empty((ts.size, np.atleast_2d(values).shape[-1]))
    for i, t in enumerate(ts):
        out[i] = interpolate_input(times, values, float(t))
    return out


@dataclass(frozen=True)
class DynamicalModel:
    """Continuous-time model x' = f(x, u, theta), y = g(x, u, theta).

    The callbacks must be pure functions of their arguments.  Analytic
    Jacobians are optional; transcriptions fall back to finite differences
    when they are absent.  `f_param_idx` / `x0_param_idx` may narrow which
    parameter entries the dynamics / initial-state map can touch, tightening
    constraint-Jacobian sparsity.
    """

    nx: int
    ny: int
    nu: int
    ntheta: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    x0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    param_names: tuple = ()
    f_x: Optional[Callable] = None
    f_theta: Optional[Callable] = None
    g_x: Optional[Callable] = None
    g_theta: Optional[Callable] = None
    x0_theta: Optional[Callable] = None
    f_param_idx: Optional[np.ndarray] = None
    x0_param_idx: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("nx", "ny", "nu", "ntheta"):
            if getattr(self, name) < 0 or (name in ("nx", "ny") and getattr(self, name) == 0):
                raise ValueError(f"invalid dimension {name}={getattr(self, name)}")
        if not self.param_names:
            object.__setattr__(
                self, "param_names", tuple(f"p{i}" for i in range(self.ntheta))
            )
        if len(self.param_names) != self.ntheta:
            raise ValueError("param_names length must equal ntheta")

    def param_index(self, name: str) -> int:
        return self.param_names.index(name)


@dataclass
class ExperimentData:
    """Sampled input signal and output measurements of one experiment.

    `times` are the N measurement instants (strictly increasing, seconds),
    `z` the N x ny measurements, and (`u_times`, `u`) the sampled input
    covering at least [times[0], times[-1]].
    """

    times: np.ndarray
    z: np.ndarray
    u_times: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if self.z.shape[0] != self.times.size:
            self.z = self.z.T
        if self.z.shape[0] != self.times.size:
            raise ValueError(
                f"measurement matrix shape {self.z.shape} does not match "
                f"{self.times.size} sample times"
            )
        self.u_times = np.asarray(self.u_times, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.times.size < 2:
            raise ValueError("at least 2 measurement instants are required")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("measurement times must be strictly increasing")
        if np.any(np.diff(self.u_times) <= 0.0):
            raise ValueError("input sample times must be strictly increasing")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("measurements contain non-finite values")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("input samples contain non-finite values")
        span = self.times[-1] - self.times[0]
        slack = 1e-12 * max(span, 1.0)
        if self.u_times[0] > self.times[0] + slack or self.u_times[-1] < self.times[-1] - slack:
            raise ValueError("input samples do not cover the measurement interval")

    @property
    def n_samples(self) -> int:
        return self.times.size

    @property
    def ny(self) -> int:
        return self.z.shape[1]

    def input_at(self, t: float) -> np.ndarray:
        return interpolate_input(self.u_times, self.u, t)


class ErrorMetric:
    """Per-sample error metric: a log-density ell(residual, theta).

    Estimation minimizes -sum_k ell(z_k - yhat_k, theta).  Subclasses
    provide `value` and `grad`; `gn_parts` is optional and enables the
    Gauss-Newton Hessian (return None to opt out).
    """

    kind = "custom"

    def __init__(self, ny: int, ntheta: int):
        self.ny = ny
        self.ntheta = ntheta

    def value(self, residual: np.ndarray, theta: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, residual, theta):
        """Return (d ell/d residual, d ell/d theta)."""
        raise NotImplementedError

    def gn_parts(self, residual, theta):
        """Whitened-residual factorization of -ell = 1/2 ||rho||^2 + linear.

        Returns (rho, d rho/d residual (ny x ny), d rho/d theta (ny x ntheta))
        or None when no Gauss-Newton structure is available.
        """
        return None


class GaussianDiagonalMetric(ErrorMetric):
    """Independent Gaussian channels; R = diag(sigma^2).

    Either `sigma` is fixed and known, or `log_sigma_idx` names the theta
    entries holding log standard deviations (one per channel), estimated
    alongside the other parameters.
    """

    kind = "gaussian-diagonal"

    def __init__(self, ny, ntheta, sigma=None, log_sigma_idx=None):
        super().__init__(ny, ntheta)
        if (sigma is None) == (log_sigma_idx is None):
            raise ValueError("provide exactly one of sigma / log_sigma_idx")
        if sigma is not None:
            sigma = np.asarray(sigma, dtype=float)
            if sigma.size != ny:
                raise ValueError("sigma must have one entry per output channel")
            if np.any(sigma <= 0.0):
                raise ValueError("standard deviations must be positive")
        else:
            log_sigma_idx = np.asarray(log_sigma_idx, dtype=int)
            if log_sigma_idx.size != ny:
                raise ValueError("log_sigma_idx must have one entry per channel")
        self.sigma = sigma
        self.log_sigma_idx = log_sigma_idx

    def sigmas(self, theta) -> np.ndarray:
        if self.sigma is not None:
            return self.sigma
        return np.exp(np.asarray(theta, dtype=float)[self.log_sigma_idx])

    def value(self, residual, theta) -> float:
        return gaussian_diag_loglike(residual, self.sigmas(theta))

    def grad(self, residual, theta):
        residual = np.asarray(residual, dtype=float)
        s = self.sigmas(theta)
        inv2 = s ** -2.0
        g_resid = -residual * inv2
        g_theta = np.zeros(self.ntheta)
        if self.log_sigma_idx is not None:
            # d ell / d log(sigma_i) = (residual_i/sigma_i)^2 - 1
            np.add.at(g_theta, self.log_sigma_idx, residual ** 2 * inv2 - 1.0)
        return g_resid, g_theta

    def gn_parts(self, residual, theta):
        residual = np.asarray(residual, dtype=float)
        s = self.sigmas(theta)
        rho = residual / s
        j_resid = np.diag(1.0 / s)
        j_theta = np.zeros((self.ny, self.ntheta))
        if self.log_sigma_idx is not None:
            j_theta[np.arange(self.ny), self.log_sigma_idx] = -rho
        return rho, j_resid, j_theta


class GaussianFullMetric(ErrorMetric):
    """Gaussian noise with a fixed, known full covariance matrix."""

    kind = "gaussian-full"

    def __init__(self, ny, ntheta, cov):
        super().__init__(ny, ntheta)
        cov = np.asarray(cov, dtype=float)
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("covariance matrix is not symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance matrix is not positive definite") from exc
        self.cov = cov
        self._cov_inv = np.linalg.inv(cov)
        self._whiten = np.linalg.inv(self._chol)

    def value(self, residual, theta) -> float:
        return gaussian_full_loglike(residual, self.cov)

    def grad(self, residual, theta):
        residual = np.asarray(residual, dtype=float)
        return -self._cov_inv @ residual, np.zeros(self.ntheta)

    def gn_parts(self, residual, theta):
        residual = np.asarray(residual, dtype=float)
        rho = self._whiten @ residual
        return rho, self._whiten.copy(), np.zeros((self.ny, self.ntheta))


class CustomMetric(ErrorMetric):
    """Adapter for user-supplied metric callbacks."""

    kind = "custom"

    def __init__(self, ny, ntheta, value_fn, grad_fn, gn_fn=None):
        super().__init__(ny, ntheta)
        self._value = value_fn
        self._grad = grad_fn
        self._gn = gn_fn

    def value(self, residual, theta) -> float:
        return float(self._value(residual, theta))

    def grad(self, residual, theta):
        return self._grad(residual, theta)

    def gn_parts(self, residual, theta):
        if self._gn is None:
            return None
        return self._gn(residual, theta)


def check_determinism(model: DynamicalModel, theta, rng, n_points: int = 3) -> None:
    """Spot-check that model callbacks are deterministic (test-mode helper)."""
    theta = np.asarray(theta, dtype=float)
    for _ in range(n_points):
        x = rng.standard_normal(model.nx)
        u = rng.standard_normal(max(model.nu, 1))[: model.nu]
        a = np.asarray(model.f(x, u, theta))
        b = np.asarray(model.f(x, u, theta))
        if not np.array_equal(a, b):
            raise AssertionError("model.f is not deterministic")
        a = np.asarray(model.g(x, u, theta))
        b = np.asarray(model.g(x, u, theta))
        if not np.array_equal(a, b):
            raise AssertionError("model.g is not deterministic")
