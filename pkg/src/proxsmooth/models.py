"""State-space models and a trajectory simulator.

A model supplies a prior ``p0``, a transition ``f_k(x_{k+1} | x_k)`` and a
measurement density ``h_k(y_k | x_k)``. The expansion code needs conditional
means and covariances (for GSLR) and log-densities (for Fourier-Hermite), so
both are part of the interface.
"""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from proxsmooth.errors import DomainError
from proxsmooth.gaussian import (
    LOG_2PI,
    GaussianMarginal,
    as_matrix,
    as_vector,
    chol_logdet,
    chol_solve,
    cholesky,
)


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    L = cholesky(cov, what="conditional cov")
    r = x - mean
    return float(-0.5 * (r.size * LOG_2PI + chol_logdet(L) + r @ chol_solve(L, r)))


class _FixedGaussianNoise:
    """Log-density of additive noise with a constant covariance, factorized once."""

    def __init__(self, cov: np.ndarray):
        self.cov = cov
        self.prec = np.linalg.inv(cov)
        self.const = -0.5 * (cov.shape[0] * LOG_2PI + chol_logdet(cholesky(cov, what="noise cov")))

    def __call__(self, r: np.ndarray) -> float:
        return float(self.const - 0.5 * r @ self.prec @ r)


class StateSpaceModel(ABC):
    """Interface for ``x0 ~ p0``, ``x_{k+1} ~ f_k(.|x_k)``, ``y_k ~ h_k(.|x_k)``."""

    dim_x: int
    dim_y: int
    name: str = "model"

    @abstractmethod
    def prior_moments(self) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def dyn_cond_mean(self, k: int, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def dyn_cond_cov(self, k: int, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def meas_cond_mean(self, k: int, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def meas_cond_cov(self, k: int, x: np.ndarray) -> np.ndarray: ...

    # Every benchmark here is conditionally Gaussian, so the densities and
    # samplers below follow from the moments. Subclasses with other laws
    # override them.

    def prior_logpdf(self, x) -> float:
        mu, Lam = self.prior_moments()
        return _gauss_logpdf(as_vector(x), mu, Lam)

    def dyn_logpdf(self, k: int, x_next, x) -> float:
        x = as_vector(x)
        return _gauss_logpdf(as_vector(x_next), self.dyn_cond_mean(k, x), self.dyn_cond_cov(k, x))

    def meas_logpdf(self, k: int, y, x) -> float:
        x = as_vector(x)
        return _gauss_logpdf(as_vector(y), self.meas_cond_mean(k, x), self.meas_cond_cov(k, x))

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        mu, Lam = self.prior_moments()
        return mu + cholesky(Lam) @ rng.standard_normal(self.dim_x)

    def sample_dyn(self, k: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        L = cholesky(self.dyn_cond_cov(k, x))
        return self.dyn_cond_mean(k, x) + L @ rng.standard_normal(self.dim_x)

    def sample_meas(self, k: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        L = cholesky(self.meas_cond_cov(k, x))
        return self.meas_cond_mean(k, x) + L @ rng.standard_normal(self.dim_y)

    @property
    def prior(self) -> GaussianMarginal:
        return GaussianMarginal(*self.prior_moments())


class LinearGaussianModel(StateSpaceModel):
    """``x_{k+1} = A x_k + b + N(0, Q)``, ``y_k = H x_k + e + N(0, R)``."""

    name = "linear_gaussian"

    def __init__(self, A, b, Q, H, e, R, mu0, Lambda0):
        self.mu0 = as_vector(mu0)
        d = self.mu0.size
        self.A = as_matrix(A, d).reshape(d, d)
        self.b = as_vector(b)
        self.Q = as_matrix(Q, d)
        self.e = as_vector(e)
        m = self.e.size
        self.H = np.asarray(H, dtype=float).reshape(m, d)
        self.R = as_matrix(R, m)
        self.Lambda0 = as_matrix(Lambda0, d)
        if self.b.size != d or self.Q.shape != (d, d) or self.Lambda0.shape != (d, d):
            raise DomainError("state dimensions are inconsistent")
        if self.R.shape != (m, m):
            raise DomainError("measurement dimensions are inconsistent")
        for M, what in ((self.Q, "Q"), (self.R, "R"), (self.Lambda0, "Lambda0")):
            cholesky(M, what=what)
        self.dim_x, self.dim_y = d, m
        self._dyn_noise = _FixedGaussianNoise(self.Q)
        self._meas_noise = _FixedGaussianNoise(self.R)

    def prior_moments(self):
        return self.mu0.copy(), self.Lambda0.copy()

    def dyn_logpdf(self, k, x_next, x):
        return self._dyn_noise(as_vector(x_next) - self.dyn_cond_mean(k, x))

    def meas_logpdf(self, k, y, x):
        return self._meas_noise(as_vector(y) - self.meas_cond_mean(k, x))

    def dyn_cond_mean(self, k, x):
        return self.A @ as_vector(x) + self.b

    def dyn_cond_cov(self, k, x):
        return self.Q.copy()

    def meas_cond_mean(self, k, x):
        return self.H @ as_vector(x) + self.e

    def meas_cond_cov(self, k, x):
        return self.R.copy()


def linear_gaussian_model(A, b, Q, H, e, R_meas, mu0, Lambda0) -> LinearGaussianModel:
    return LinearGaussianModel(A, b, Q, H, e, R_meas, mu0, Lambda0)


def random_walk_model() -> LinearGaussianModel:
    """The 1-D random walk with unit noises and a standard normal prior."""
    return LinearGaussianModel(1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0)


def random_linear_model(rng: np.random.Generator, d: int, m: int) -> LinearGaussianModel:
    """A stable random linear-Gaussian model, used by tests and benchmarks."""
    A = rng.normal(size=(d, d))
    A *= 0.9 / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    Bq = rng.normal(size=(d, d))
    Br = rng.normal(size=(m, m))
    Bl = rng.normal(size=(d, d))
    return LinearGaussianModel(
        A=A,
        b=rng.normal(scale=0.3, size=d),
        Q=0.3 * Bq @ Bq.T + 0.2 * np.eye(d),
        H=rng.normal(size=(m, d)),
        e=rng.normal(scale=0.3, size=m),
        R=0.3 * Br @ Br.T + 0.2 * np.eye(m),
        mu0=rng.normal(size=d),
        Lambda0=0.5 * Bl @ Bl.T + 0.5 * np.eye(d),
    )


class StochasticVolatilityModel(StateSpaceModel):
    """Log-volatility AR(1) with ``y_k ~ N(0, scale^2 exp(x_k))``.

    The prior is the stationary law ``N(0, q^2 / (1 - a^2))``.
    """

    name = "stochastic_volatility"
    dim_x = 1
    dim_y = 1

    def __init__(self, a: float = 0.97, q: float = 0.15, scale: float = 0.65):
        if not abs(a) < 1 or q <= 0 or scale <= 0:
            raise DomainError("need |a| < 1, q > 0, scale > 0")
        self.a, self.q, self.scale = float(a), float(q), float(scale)

    @property
    def stationary_var(self) -> float:
        return self.q**2 / (1.0 - self.a**2)

    def prior_moments(self):
        return np.zeros(1), np.array([[self.stationary_var]])

    def dyn_cond_mean(self, k, x):
        return self.a * as_vector(x)

    def dyn_cond_cov(self, k, x):
        return np.array([[self.q**2]])

    def dyn_logpdf(self, k, x_next, x):
        r = as_vector(x_next)[0] - self.a * as_vector(x)[0]
        return float(-0.5 * (LOG_2PI + 2.0 * np.log(self.q)) - 0.5 * r**2 / self.q**2)

    def meas_cond_mean(self, k, x):
        return np.zeros(1)

    def meas_cond_cov(self, k, x):
        return np.array([[self.scale**2 * np.exp(as_vector(x)[0])]])

    def meas_logpdf(self, k, y, x):
        x0 = as_vector(x)[0]
        y0 = as_vector(y)[0]
        var = self.scale**2 * np.exp(x0)
        return float(-0.5 * (LOG_2PI + np.log(self.scale**2) + x0) - 0.5 * y0**2 / var)


def stochastic_volatility_model(a: float = 0.97, q: float = 0.15, scale: float = 0.65) -> StochasticVolatilityModel:
    return StochasticVolatilityModel(a, q, scale)


class PendulumModel(StateSpaceModel):
    """Euler-discretized pendulum with state ``(angle, velocity)``.

    Process noise is the integrated white-noise acceleration covariance with
    spectral density ``q_c``; the measurement is ``sin(angle)`` plus Gaussian
    noise of variance ``r_meas``.
    """

    name = "pendulum"
    dim_x = 2
    dim_y = 1

    def __init__(
        self,
        dt: float = 0.01,
        g_over_L: float = 9.81,
        q_c: float = 0.01,
        r_meas: float = 0.1,
        mu0=(1.5, 0.0),
        Lambda0=((0.1, 0.0), (0.0, 0.1)),
    ):
        if dt <= 0:
            raise DomainError("dt must be positive")
        self.dt, self.g_over_L, self.q_c, self.r_meas = float(dt), float(g_over_L), float(q_c), float(r_meas)
        self.mu0 = as_vector(mu0)
        self.Lambda0 = as_matrix(Lambda0, 2).reshape(2, 2)
        self.Q = q_c * np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
        self._dyn_noise = _FixedGaussianNoise(self.Q)
        self._meas_noise = _FixedGaussianNoise(np.array([[self.r_meas]]))

    def dyn_logpdf(self, k, x_next, x):
        return self._dyn_noise(as_vector(x_next) - self.dyn_cond_mean(k, x))

    def meas_logpdf(self, k, y, x):
        return self._meas_noise(as_vector(y) - self.meas_cond_mean(k, x))

    def prior_moments(self):
        return self.mu0.copy(), self.Lambda0.copy()

    def dyn_cond_mean(self, k, x):
        th, om = as_vector(x)
        return np.array([th + om * self.dt, om - self.g_over_L * np.sin(th) * self.dt])

    def dyn_cond_cov(self, k, x):
        return self.Q.copy()

    def meas_cond_mean(self, k, x):
        return np.array([np.sin(as_vector(x)[0])])

    def meas_cond_cov(self, k, x):
        return np.array([[self.r_meas]])


def pendulum_model(dt: float = 0.01, g_over_L: float = 9.81, q_c: float = 0.01, r_meas: float = 0.1, **kw) -> PendulumModel:
    return PendulumModel(dt, g_over_L, q_c, r_meas, **kw)


# ---------------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Trajectory:
    """States ``x_0..x_T`` (rows) and observations ``y_1..y_T`` (row ``k-1``)."""

    states: np.ndarray
    observations: np.ndarray
    seed: int | None = None

    @property
    def horizon(self) -> int:
        return self.observations.shape[0]

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.observations.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + [f"x{i}" for i in range(d)] + [f"y{j}" for j in range(m)])
            for k in range(self.states.shape[0]):
                ys = [""] * m if k == 0 else [repr(float(v)) for v in self.observations[k - 1]]
                w.writerow([k] + [repr(float(v)) for v in self.states[k]] + ys)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xi = [i for i, h in enumerate(header) if h.startswith("x")]
        yi = [i for i, h in enumerate(header) if h.startswith("y")]
        states = np.array([[float(r[i]) for i in xi] for r in body])
        obs = np.array([[float(r[i]) for i in yi] for r in body[1:]])
        return cls(states, obs.reshape(len(body) - 1, len(yi)))


def simulate(model: StateSpaceModel, T: int, seed: int) -> Trajectory:
    """Ancestral sample of ``x_{0:T}, y_{1:T}``; deterministic given ``seed``."""
    if T < 1:
        raise DomainError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    xs = np.empty((T + 1, model.dim_x))
    ys = np.empty((T, model.dim_y))
    xs[0] = model.sample_prior(rng)
    for k in range(T):
        xs[k + 1] = model.sample_dyn(k, xs[k], rng)
        ys[k] = model.sample_meas(k + 1, xs[k + 1], rng)
    return Trajectory(xs, ys, seed)


MODEL_FACTORIES = {
    "linear_gaussian": linear_gaussian_model,
    "stochastic_volatility": stochastic_volatility_model,
    "pendulum": pendulum_model,
}
