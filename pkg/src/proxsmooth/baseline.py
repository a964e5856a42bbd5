"""Reference smoothers: Kalman/RTS for linear-Gaussian models and a dense grid
forward-backward for scalar nonlinear models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from proxsmooth.errors import DomainError, GridTooSmallError
from proxsmooth.gaussian import (
    LOG_2PI,
    GaussianMarginal,
    chol_logdet,
    chol_solve,
    cholesky,
    symmetrize,
)
from proxsmooth.models import LinearGaussianModel, StateSpaceModel


@dataclass(frozen=True)
class RtsResult:
    filtered: list[GaussianMarginal]
    predicted: list[GaussianMarginal]  # predicted[k-1] is p(x_k | y_{1:k-1})
    smoothed: list[GaussianMarginal]
    log_likelihood: float


def kalman_rts(model: LinearGaussianModel, observations) -> RtsResult:
    """Kalman filter (Joseph-form update) followed by the RTS smoother."""
    if not isinstance(model, LinearGaussianModel):
        raise DomainError("kalman_rts needs a linear-Gaussian model")
    Y = np.asarray(observations, dtype=float).reshape(-1, model.dim_y)
    A, b, Q, H, e, R = model.A, model.b, model.Q, model.H, model.e, model.R
    d = model.dim_x
    I = np.eye(d)
    m, P = model.mu0.copy(), model.Lambda0.copy()
    filtered = [GaussianMarginal(m, P)]
    predicted = []
    loglik = 0.0
    for k in range(Y.shape[0]):
        m = A @ m + b
        P = symmetrize(A @ P @ A.T + Q)
        predicted.append(GaussianMarginal(m, P))
        S = symmetrize(H @ P @ H.T + R)
        try:
            Ls = cholesky(S, what="innovation covariance")
        except DomainError as exc:
            raise DomainError(f"innovation covariance at k={k + 1}: {exc}") from exc
        v = Y[k] - (H @ m + e)
        K = chol_solve(Ls, H @ P).T
        loglik += -0.5 * (v.size * LOG_2PI + chol_logdet(Ls) + v @ chol_solve(Ls, v))
        m = m + K @ v
        IKH = I - K @ H
        P = symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
        filtered.append(GaussianMarginal(m, P))
    smoothed = [filtered[-1]]
    for k in range(Y.shape[0] - 1, -1, -1):
        f, p = filtered[k], predicted[k]
        G = chol_solve(cholesky(p.cov, what="predicted cov"), A @ f.cov).T
        s = smoothed[0]
        smoothed.insert(
            0,
            GaussianMarginal(
                f.mean + G @ (s.mean - p.mean),
                symmetrize(f.cov + G @ (s.cov - p.cov) @ G.T),
            ),
        )
    return RtsResult(filtered, predicted, smoothed, float(loglik))


# ---------------------------------------------------------------------- grid oracle

EDGE_FRACTION = 0.005
EDGE_MASS = 1e-6
KERNEL_LOG_CUTOFF = 60.0


def _trapezoid_weights(x: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _gaussian_logpdf_1d(y, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (y - mean) ** 2 / var


def _transition_matrix(model: StateSpaceModel, k: int, x: np.ndarray) -> scipy.sparse.csc_matrix:
    """Sparse ``K[i, j] = f_k(x_i | x_j)``, dropping entries below ``e^-60`` of the column peak."""
    n = x.size
    means = np.array([model.dyn_cond_mean(k, np.array([xj]))[0] for xj in x])
    var = np.array([model.dyn_cond_cov(k, np.array([xj]))[0, 0] for xj in x])
    half = np.sqrt(2.0 * KERNEL_LOG_CUTOFF * var)
    lo = np.searchsorted(x, means - half, side="left")
    hi = np.searchsorted(x, means + half, side="right")
    indptr = np.concatenate([[0], np.cumsum(hi - lo)])
    indices = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if n else np.array([], int)
    cols = np.repeat(np.arange(n), hi - lo)
    data = np.exp(_gaussian_logpdf_1d(x[indices], means[cols], var[cols]))
    return scipy.sparse.csc_matrix((data, indices, indptr), shape=(n, n))


def grid_smoother_1d(
    model: StateSpaceModel,
    observations,
    grid: tuple[float, float, int] = (-10.0, 10.0, 8001),
) -> list[tuple[float, float]]:
    """Brute-force forward-backward smoother on a uniform 1-D grid.

    Densities are represented by their values at the grid points and
    integrated with the trapezoid rule. The transition kernel uses the model's
    conditional moments, so the model must be conditionally Gaussian in its
    dynamics; the measurement density is evaluated through ``meas_logpdf``.

    Returns
    -------
    list of (mean, variance)
        Smoothed moments for k = 0..T.

    Raises
    ------
    GridTooSmallError
        If a smoothed density keeps more than ``1e-6`` of its mass in the
        outer half percent of the grid on either side.
    """
    if model.dim_x != 1:
        raise DomainError("grid_smoother_1d needs a scalar state")
    lo, hi, n = grid
    n = int(n)
    if not (hi > lo and n >= 3):
        raise DomainError("grid must have hi > lo and at least 3 points")
    x = np.linspace(lo, hi, n)
    w = _trapezoid_weights(x)
    Y = np.asarray(observations, dtype=float).reshape(-1, model.dim_y)
    T = Y.shape[0]

    prior = np.exp(np.array([model.prior_logpdf(np.array([xi])) for xi in x]))
    loglik = [np.array([model.meas_logpdf(k + 1, Y[k], np.array([xi])) for xi in x]) for k in range(T)]
    lik = [np.exp(l - l.max()) for l in loglik]

    kernels: dict[int, scipy.sparse.csc_matrix] = {}

    def kernel(k):
        # all benchmarks are time-homogeneous; key by k so inhomogeneous models still work
        key = 0 if getattr(model, "time_homogeneous", True) else k
        if key not in kernels:
            kernels[key] = _transition_matrix(model, k, x)
        return kernels[key]

    alpha = [prior / (w @ prior)]
    for k in range(T):
        pred = kernel(k) @ (w * alpha[k])
        a = pred * lik[k]
        alpha.append(a / (w @ a))
    beta = [np.ones(n)] * (T + 1)
    for k in range(T - 1, -1, -1):
        b = kernel(k).T @ (w * lik[k] * beta[k + 1])
        beta[k] = b / np.max(b)

    edge = max(1, int(np.ceil(EDGE_FRACTION * n)))
    out = []
    for k in range(T + 1):
        p = alpha[k] * beta[k]
        p = p / (w @ p)
        tail = w[:edge] @ p[:edge] + w[-edge:] @ p[-edge:]
        if tail > EDGE_MASS:
            raise GridTooSmallError(f"mass {tail:.3g} near the grid edge at k={k}")
        mean = float(w @ (x * p))
        var = float(w @ ((x - mean) ** 2 * p))
        out.append((mean, var))
    return out
