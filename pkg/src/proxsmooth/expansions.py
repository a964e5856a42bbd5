"""Local quadratic surrogates of the model log-densities.

Two routes produce the quadratic coefficients around the current iterate:

* statistical linear regression (GSLR), which fits an affine-Gaussian model
  to the conditional moments and maps it to a log-density quadratic;
* a second-order Fourier-Hermite expansion of the log-density itself, which
  needs only function evaluations at quadrature nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal, Sequence

import numpy as np

from proxsmooth.errors import DomainError, EvaluationError
from proxsmooth.gaussian import (
    LOG_2PI,
    GaussianMarginal,
    JointQuadratic,
    QuadraticForm,
    affine_log_density_quadratic,
    as_matrix,
    as_vector,
    chol_logdet,
    chol_solve,
    cholesky,
    symmetrize,
)
from proxsmooth.models import LinearGaussianModel, StateSpaceModel
from proxsmooth.quadrature import QuadratureRule, make_rule, sigma_points

Method = Literal["gslr", "fourier_hermite", "exact"]
RuleFactory = Callable[[int], QuadratureRule]

PSD_JITTER = 1e-10


@dataclass(frozen=True)
class AffineRegression:
    """``y ~ N(gain x + offset, noise_cov)``."""

    gain: np.ndarray
    offset: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        b = as_vector(self.offset)
        object.__setattr__(self, "offset", b)
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)).reshape(b.size, -1))
        object.__setattr__(self, "noise_cov", symmetrize(as_matrix(self.noise_cov, b.size)))


@dataclass(frozen=True)
class ModelExpansion:
    """Quadratic surrogates: ``dyn[k]`` over ``(x_{k+1}, x_k)`` for k=0..T-1,
    ``meas[k-1]`` over ``x_k`` for k=1..T, and ``prior`` over ``x_0``."""

    dyn: tuple[JointQuadratic, ...]
    meas: tuple[QuadraticForm, ...]
    prior: QuadraticForm

    def __post_init__(self):
        object.__setattr__(self, "dyn", tuple(self.dyn))
        object.__setattr__(self, "meas", tuple(self.meas))
        if len(self.dyn) != len(self.meas):
            raise DomainError("dyn and meas lengths differ")

    @property
    def horizon(self) -> int:
        return len(self.dyn)

    def site(self, k: int) -> QuadraticForm:
        """The unary term at time ``k``: the prior at 0, the measurement otherwise."""
        return self.prior if k == 0 else self.meas[k - 1]


def rule_factory(kind: str = "default", order: int | None = None) -> RuleFactory:
    """A cached ``dim -> QuadratureRule`` map for a fixed family."""

    @lru_cache(maxsize=None)
    def build(dim: int) -> QuadratureRule:
        return make_rule(kind, order, dim)

    return build


# -------------------------------------------------------------------------- GSLR


def gslr(
    cond_mean: Callable[[np.ndarray], np.ndarray],
    cond_cov: Callable[[np.ndarray], np.ndarray],
    marg: GaussianMarginal,
    rule: QuadratureRule,
) -> AffineRegression:
    """Statistical linear regression of ``y | x`` under ``x ~ marg``.

    Marginal moments of ``y`` come from the law of total expectation,
    ``V[y] = E[V[y|x]] + V[E[y|x]]``. The residual covariance is clipped to
    be positive semidefinite.
    """
    try:
        Lx = cholesky(marg.cov, what="V[x]")
    except DomainError as exc:
        raise DomainError(f"singular V[x]: {exc}") from exc
    X = sigma_points(rule, marg, Lx)
    w = rule.weights
    means = np.array([as_vector(cond_mean(x)) for x in X])
    covs = np.array([np.atleast_2d(np.asarray(cond_cov(x), dtype=float)) for x in X])
    Ey = w @ means
    dy = means - Ey
    dx = X - marg.mean
    Cyx = (w[:, None] * dy).T @ dx
    Vy = np.tensordot(w, covs, axes=1) + (w[:, None] * dy).T @ dy
    A = chol_solve(Lx, Cyx.T).T
    b = Ey - A @ marg.mean
    Omega = symmetrize(Vy - A @ marg.cov @ A.T)
    vals, vecs = np.linalg.eigh(Omega)
    if vals.min() < 0:
        Omega = symmetrize((vecs * np.clip(vals, 0.0, None)) @ vecs.T)
    return AffineRegression(A, b, Omega)


def floor_noise_cov(Omega: np.ndarray) -> np.ndarray:
    """Add ``1e-10 * trace/d`` when ``Omega`` is only semidefinite."""
    try:
        cholesky(Omega)
        return Omega
    except DomainError:
        d = Omega.shape[0]
        bump = PSD_JITTER * max(np.trace(Omega) / d, 1.0)
        Omega = Omega + bump * np.eye(d)
        try:
            cholesky(Omega)
        except DomainError as exc:
            raise DomainError(f"noise covariance not invertible after floor: {exc}") from exc
        return Omega


def regression_to_dyn_quadratic(reg: AffineRegression) -> JointQuadratic:
    """``log N(x_next | A x + b, Omega)`` as a joint quadratic."""
    return affine_log_density_quadratic(reg.gain, reg.offset, floor_noise_cov(reg.noise_cov))


def regression_to_meas_quadratic(reg: AffineRegression, y) -> QuadraticForm:
    """``log N(y | H x + e, Delta)`` as a quadratic in ``x``."""
    y = as_vector(y)
    H, e = reg.gain, reg.offset
    L = cholesky(floor_noise_cov(reg.noise_cov), what="measurement noise")
    r = y - e
    Dinv_H = chol_solve(L, H)
    Dinv_r = chol_solve(L, r)
    return QuadraticForm(
        symmetrize(H.T @ Dinv_H),
        H.T @ Dinv_r,
        -0.5 * (y.size * LOG_2PI + chol_logdet(L)) - 0.5 * r @ Dinv_r,
    )


# ----------------------------------------------------------------- Fourier-Hermite


def fourier_hermite(
    g: Callable[[np.ndarray], float],
    marg: GaussianMarginal,
    rule: QuadratureRule,
    sqrt: np.ndarray | None = None,
) -> QuadraticForm:
    """Second-order Fourier-Hermite expansion of a scalar ``g`` around ``marg``.

    The gradient and Hessian expectations are obtained from ``g`` alone through
    the Hermite identities ``E[g_z] = E[g z]`` and ``E[g_zz] = E[g (zz' - I)]``
    in unit space, then mapped back through the square root ``S`` of ``P``.
    The rule must integrate quartic polynomials exactly (Gauss-Hermite order
    >= 3) for quadratic ``g`` to be recovered exactly.
    """
    S = cholesky(marg.cov, what="marginal cov") if sqrt is None else np.asarray(sqrt, dtype=float)
    X = sigma_points(rule, marg, S)
    Z = rule.nodes
    w = rule.weights
    vals = np.array([float(g(x)) for x in X])
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise EvaluationError(f"non-finite value at node {X[bad]!r}")
    d = marg.dim
    Eg = float(w @ vals)
    Egz = (w * vals) @ Z
    Egzz = np.einsum("n,ni,nj->ij", w * vals, Z, Z) - Eg * np.eye(d)
    Sinv_T = np.linalg.inv(S).T
    Gz = Sinv_T @ Egz
    Gzz = symmetrize(Sinv_T @ Egzz @ Sinv_T.T)
    m = marg.mean
    U = -Gzz
    u = Gz - Gzz @ m
    eta = Eg - Gz @ m + 0.5 * m @ Gzz @ m - 0.5 * np.trace(S.T @ Gzz @ S)
    return QuadraticForm(U, u, eta)


# ------------------------------------------------------------------ whole model


def _as_factory(rule) -> RuleFactory:
    if rule is None:
        return rule_factory()
    if isinstance(rule, QuadratureRule):
        fixed = rule

        def same(dim: int) -> QuadratureRule:
            return fixed if fixed.dim == dim else make_rule("default", None, dim)

        return same
    return rule


def exact_linear_expansion(model: LinearGaussianModel, observations) -> ModelExpansion:
    """Analytic coefficients of a linear-Gaussian model (no quadrature)."""
    Y = np.atleast_2d(np.asarray(observations, dtype=float)).reshape(-1, model.dim_y)
    T = Y.shape[0]
    dyn = affine_log_density_quadratic(model.A, model.b, model.Q)
    reg = AffineRegression(model.H, model.e, model.R)
    meas = [regression_to_meas_quadratic(reg, Y[k]) for k in range(T)]
    return ModelExpansion([dyn] * T, meas, QuadraticForm.from_gaussian(model.prior))


def expand_model(
    model: StateSpaceModel,
    observations,
    marginals: Sequence[GaussianMarginal],
    joints: Sequence[GaussianMarginal] | None,
    method: Method = "gslr",
    rule: RuleFactory | QuadratureRule | None = None,
) -> ModelExpansion:
    """Quadratic surrogates of the whole model around the current iterate.

    Parameters
    ----------
    observations
        ``(T, dim_y)`` array; row ``k-1`` holds ``y_k``.
    marginals
        ``T+1`` marginals of the current iterate.
    joints
        ``T`` Gaussians over the stacked pair ``[x_{k+1}; x_k]``; only the
        Fourier-Hermite path reads them.
    method
        ``"gslr"``, ``"fourier_hermite"``, or ``"exact"`` (linear-Gaussian
        models only; ignores the iterate).
    rule
        A ``dim -> QuadratureRule`` factory, or a single rule.
    """
    Y = np.atleast_2d(np.asarray(observations, dtype=float)).reshape(-1, model.dim_y)
    T = Y.shape[0]
    if len(marginals) != T + 1:
        raise DomainError(f"expected {T + 1} marginals, got {len(marginals)}")
    if method == "exact":
        if not isinstance(model, LinearGaussianModel):
            raise DomainError("exact expansion needs a linear-Gaussian model")
        return exact_linear_expansion(model, Y)
    rules = _as_factory(rule)
    d = model.dim_x

    if method == "gslr":
        dyn, meas = [], []
        for k in range(T):
            reg = gslr(
                lambda x, k=k: model.dyn_cond_mean(k, x),
                lambda x, k=k: model.dyn_cond_cov(k, x),
                marginals[k],
                rules(d),
            )
            dyn.append(regression_to_dyn_quadratic(reg))
            reg = gslr(
                lambda x, k=k: model.meas_cond_mean(k + 1, x),
                lambda x, k=k: model.meas_cond_cov(k + 1, x),
                marginals[k + 1],
                rules(d),
            )
            meas.append(regression_to_meas_quadratic(reg, Y[k]))
        prior = QuadraticForm.from_gaussian(model.prior)
        return ModelExpansion(dyn, meas, prior)

    if method == "fourier_hermite":
        if joints is None or len(joints) != T:
            raise DomainError(f"expected {T} pairwise joints")
        dyn, meas = [], []
        for k in range(T):
            stacked = fourier_hermite(
                lambda z, k=k: model.dyn_logpdf(k, z[:d], z[d:]), joints[k], rules(2 * d)
            )
            dyn.append(JointQuadratic.from_stacked(stacked, d))
            meas.append(
                fourier_hermite(lambda x, k=k: model.meas_logpdf(k + 1, Y[k], x), marginals[k + 1], rules(d))
            )
        prior = fourier_hermite(model.prior_logpdf, marginals[0], rules(d))
        return ModelExpansion(dyn, meas, prior)

    raise DomainError(f"unknown expansion method {method!r}")


def affine_regression_of(model: LinearGaussianModel) -> tuple[AffineRegression, AffineRegression]:
    """The exact (dynamics, measurement) regressions of a linear model."""
    return AffineRegression(model.A, model.b, model.Q), AffineRegression(model.H, model.e, model.R)


__all__ = [
    "AffineRegression",
    "ModelExpansion",
    "gslr",
    "regression_to_dyn_quadratic",
    "regression_to_meas_quadratic",
    "fourier_hermite",
    "expand_model",
    "exact_linear_expansion",
    "rule_factory",
]
