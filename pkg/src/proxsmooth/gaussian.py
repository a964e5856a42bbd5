"""Gaussian and quadratic-form algebra.

Every recursion in the smoothers reduces to a handful of identities on
Gaussians and exponentiated quadratics; they live here. All values are
immutable, all functions pure.

Conventions
-----------
A quadratic form ``(U, u, eta)`` denotes ``-1/2 x'Ux + x'u + eta``. A joint
quadratic over a state pair ``(x_next, x)`` denotes

    -1/2 [x_next; x]' [[C_nn, -C_nc], [-C_nc', C_cc]] [x_next; x]
        + x_next' c_n + x' c_c + kappa

so that the Gaussian transition ``N(x_next | A x + b, W)`` has ``C_nc = W^-1 A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import mpmath
import numpy as np
import scipy.linalg

from proxsmooth.errors import DomainError, NotIntegrableError

LOG_2PI = float(np.log(2.0 * np.pi))

Direction = Literal["forward", "reverse"]


def as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)


def as_matrix(M, dim: int | None = None) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        if dim is not None and A.size == dim * dim and dim > 1:
            A = A.reshape(dim, dim)
        else:
            A = A.reshape(1, -1) if A.size != 1 else A.reshape(1, 1)
    return A


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def cholesky(M: np.ndarray, jitter: float = 0.0, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``M``; raise :class:`DomainError` if not PD.

    ``jitter`` is a relative diagonal loading (multiplied by ``trace(M)/d``),
    capped at 1e-9. It is zero unless the caller opts in.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{what} has non-finite entries")
    if jitter:
        jitter = min(float(jitter), 1e-9)
        d = M.shape[0]
        M = M + jitter * abs(np.trace(M)) / d * np.eye(d)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"{what} is not positive definite") from exc
    if not np.all(np.diag(L) > 0.0):
        raise DomainError(f"{what} is not positive definite")
    return L


def is_pd(M: np.ndarray) -> bool:
    try:
        cholesky(M)
    except DomainError:
        return False
    return True


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve((L, True), B)


def chol_inverse(L: np.ndarray) -> np.ndarray:
    return symmetrize(chol_solve(L, np.eye(L.shape[0])))


def chol_logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def pd_inverse(M: np.ndarray, what: str = "matrix", jitter: float = 0.0) -> np.ndarray:
    return chol_inverse(cholesky(M, jitter=jitter, what=what))


def _check_symmetric(M: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if float(np.max(np.abs(M - M.T), initial=0.0)) > 1e-12 * scale:
        raise DomainError(f"{name} is not symmetric")


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class GaussianMarginal:
    """Mean/covariance pair for one time step."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = as_vector(self.mean)
        P = as_matrix(self.cov, m.size)
        if P.shape != (m.size, m.size):
            raise DomainError(f"cov shape {P.shape} does not match mean size {m.size}")
        _check_symmetric(P, "cov")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", symmetrize(P))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def precision(self) -> np.ndarray:
        return pd_inverse(self.cov, "cov")


@dataclass(frozen=True)
class AffineGaussianConditional:
    """``N(x_to | F x_from + d, Sigma)``; forward maps k -> k+1, reverse k -> k-1."""

    gain: np.ndarray
    offset: np.ndarray
    noise_cov: np.ndarray
    direction: Direction = "forward"

    def __post_init__(self):
        d = as_vector(self.offset)
        F = as_matrix(self.gain, d.size)
        S = as_matrix(self.noise_cov, d.size)
        if F.shape[0] != d.size or S.shape != (d.size, d.size):
            raise DomainError("conditional shapes are inconsistent")
        if self.direction not in ("forward", "reverse"):
            raise DomainError(f"unknown direction {self.direction!r}")
        _check_symmetric(S, "noise_cov")
        object.__setattr__(self, "gain", F)
        object.__setattr__(self, "offset", d)
        object.__setattr__(self, "noise_cov", symmetrize(S))


@dataclass(frozen=True)
class QuadraticForm:
    """``-1/2 x'Ux + x'u + eta``; the curvature may be indefinite."""

    curvature: np.ndarray
    linear: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        u = as_vector(self.linear)
        U = as_matrix(self.curvature, u.size)
        if U.shape != (u.size, u.size):
            raise DomainError("curvature/linear shapes are inconsistent")
        _check_symmetric(U, "curvature")
        object.__setattr__(self, "curvature", symmetrize(U))
        object.__setattr__(self, "linear", u)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def dim(self) -> int:
        return self.linear.size

    def __call__(self, x) -> float:
        x = as_vector(x)
        return float(-0.5 * x @ self.curvature @ x + x @ self.linear + self.constant)

    def __add__(self, other: "QuadraticForm") -> "QuadraticForm":
        return QuadraticForm(
            self.curvature + other.curvature,
            self.linear + other.linear,
            self.constant + other.constant,
        )

    def scale(self, c: float) -> "QuadraticForm":
        return QuadraticForm(c * self.curvature, c * self.linear, c * self.constant)

    @classmethod
    def zero(cls, dim: int) -> "QuadraticForm":
        return cls(np.zeros((dim, dim)), np.zeros(dim), 0.0)

    @classmethod
    def from_gaussian(cls, marg: GaussianMarginal) -> "QuadraticForm":
        """The log-density of ``marg`` written as a quadratic form."""
        L = cholesky(marg.cov, what="cov")
        Pinv = chol_inverse(L)
        Pinv_m = chol_solve(L, marg.mean)
        const = -0.5 * (marg.dim * LOG_2PI + chol_logdet(L)) - 0.5 * marg.mean @ Pinv_m
        return cls(Pinv, Pinv_m, const)


@dataclass(frozen=True)
class JointQuadratic:
    """Block quadratic over ``(x_next, x)``; see the module docstring for signs."""

    block_nn: np.ndarray
    block_cc: np.ndarray
    block_nc: np.ndarray
    lin_n: np.ndarray
    lin_c: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        cn, cc = as_vector(self.lin_n), as_vector(self.lin_c)
        nn = as_matrix(self.block_nn, cn.size)
        cc_ = as_matrix(self.block_cc, cc.size)
        nc = np.asarray(self.block_nc, dtype=float).reshape(cn.size, cc.size)
        _check_symmetric(nn, "block_nn")
        _check_symmetric(cc_, "block_cc")
        object.__setattr__(self, "block_nn", symmetrize(nn))
        object.__setattr__(self, "block_cc", symmetrize(cc_))
        object.__setattr__(self, "block_nc", nc)
        object.__setattr__(self, "lin_n", cn)
        object.__setattr__(self, "lin_c", cc)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def block_cn(self) -> np.ndarray:
        return self.block_nc.T

    def __call__(self, x_next, x) -> float:
        return self.stacked()(np.concatenate([as_vector(x_next), as_vector(x)]))

    def stacked(self) -> QuadraticForm:
        """The same quadratic as a :class:`QuadraticForm` over ``[x_next; x]``."""
        U = np.block([[self.block_nn, -self.block_nc], [-self.block_cn, self.block_cc]])
        return QuadraticForm(U, np.concatenate([self.lin_n, self.lin_c]), self.constant)

    @classmethod
    def from_stacked(cls, q: QuadraticForm, dim_next: int) -> "JointQuadratic":
        n = dim_next
        U = q.curvature
        return cls(
            block_nn=U[:n, :n],
            block_cc=U[n:, n:],
            block_nc=-U[:n, n:],
            lin_n=q.linear[:n],
            lin_c=q.linear[n:],
            constant=q.constant,
        )


@dataclass(frozen=True)
class WorkingBlocks:
    """Per-step blocks of the combined exponent inside a smoother pass.

    ``Gnn``, ``Gcc`` and ``Gnc`` follow the joint-quadratic sign convention
    (next, current); ``theta`` is the constant term.
    """

    Gnn: np.ndarray
    Gcc: np.ndarray
    Gnc: np.ndarray
    gn: np.ndarray
    gc: np.ndarray
    theta: float


@dataclass(frozen=True)
class BoundaryBlocks:
    """Blocks of the boundary tilt over ``(x, m)`` (state and prior-iterate mean)."""

    Jxx: np.ndarray
    Jxm: np.ndarray
    Jmm: np.ndarray
    jx: np.ndarray
    jm: np.ndarray
    tau: float = field(default=0.0)


# ---------------------------------------------------------------------- operations


def log_pdf(marg: GaussianMarginal, x) -> float:
    x = as_vector(x)
    if x.size != marg.dim:
        raise DomainError("dimension mismatch")
    L = cholesky(marg.cov, what="cov")
    z = scipy.linalg.solve_triangular(L, x - marg.mean, lower=True)
    return float(-0.5 * (marg.dim * LOG_2PI + chol_logdet(L) + z @ z))


def gaussian_kl(q: GaussianMarginal, p: GaussianMarginal) -> float:
    """Closed-form ``KL(q || p)``."""
    if q.dim != p.dim:
        raise DomainError("dimension mismatch")
    Lq = cholesky(q.cov, what="q.cov")
    Lp = cholesky(p.cov, what="p.cov")
    diff = p.mean - q.mean
    trace = float(np.trace(chol_solve(Lp, q.cov)))
    quad = float(diff @ chol_solve(Lp, diff))
    kl = 0.5 * (trace + quad - q.dim + chol_logdet(Lp) - chol_logdet(Lq))
    return max(kl, 0.0)


def log_integral_quadratic(q: QuadraticForm) -> float:
    """``log \\int exp(-1/2 x'Ux + x'u + eta) dx`` for positive-definite ``U``."""
    try:
        L = cholesky(q.curvature, what="curvature")
    except DomainError as exc:
        raise NotIntegrableError(str(exc)) from exc
    sol = chol_solve(L, q.linear)
    return float(0.5 * (q.dim * LOG_2PI - chol_logdet(L)) + 0.5 * q.linear @ sol + q.constant)


def tilt_exponent(prior: GaussianMarginal, potential: QuadraticForm, beta: float) -> QuadraticForm:
    """``beta * log prior(x) + (1 - beta) * potential(x)`` as a quadratic form."""
    return QuadraticForm.from_gaussian(prior).scale(beta) + potential.scale(1.0 - beta)


def damped_gaussian_tilt(
    prior: GaussianMarginal,
    potential: QuadraticForm,
    beta: float,
    jitter: float = 0.0,
) -> tuple[GaussianMarginal, float]:
    """Normalize ``prior^beta * exp(potential)^(1-beta)``.

    Returns the resulting Gaussian and its log-normalizer. With ``beta=0`` this
    is the Gaussian with precision ``R`` and mean ``R^-1 r``; as ``beta -> 1``
    it freezes at ``prior``.
    """
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta={beta} outside [0, 1)")
    if potential.dim != prior.dim:
        raise DomainError("dimension mismatch")
    expo = tilt_exponent(prior, potential, beta)
    try:
        L = cholesky(expo.curvature, jitter=jitter, what="tilted precision")
    except DomainError as exc:
        raise NotIntegrableError(str(exc)) from exc
    cov = chol_inverse(L)
    mean = chol_solve(L, expo.linear)
    return GaussianMarginal(mean, cov), log_integral_quadratic(expo)


def _tilt_log_z_mp(prior_cov, potential, beta, mean, dps: int = 50):
    """``log Z`` of the damped tilt evaluated in extended precision.

    ``log Z`` is exactly quadratic in the prior mean, so central differences
    carry no truncation error; float64 roundoff (~eps/h^2) would dominate.
    """
    with mpmath.workdps(dps):
        b = mpmath.mpf(beta)
        P = mpmath.matrix(prior_cov.tolist())
        m = mpmath.matrix([mpmath.mpf(v) for v in mean])
        R = mpmath.matrix(potential.curvature.tolist())
        r = mpmath.matrix(potential.linear.tolist())
        d = P.rows
        Pinv = mpmath.inverse(P)
        U = (1 - b) * R + b * Pinv
        u = (1 - b) * r + b * (Pinv * m)
        c = (1 - b) * mpmath.mpf(potential.constant) + b * (
            -0.5 * (d * mpmath.log(2 * mpmath.pi) + mpmath.log(mpmath.det(P)))
            - 0.5 * (m.T * Pinv * m)[0]
        )
        Uinv_u = mpmath.lu_solve(U, u)
        return (
            0.5 * (d * mpmath.log(2 * mpmath.pi) - mpmath.log(mpmath.det(U)))
            + 0.5 * (u.T * Uinv_u)[0]
            + c
        )


def tilt_moment_check(
    prior: GaussianMarginal,
    potential: QuadraticForm,
    beta: float,
    h: float = 1e-5,
) -> tuple[float, float]:
    """Compare tilted moments against finite differences of ``log Z``.

    The first and second derivatives of ``log Z`` with respect to the prior
    mean determine the tilted mean and covariance; they are taken here by
    central differences with step ``h * sqrt(P_ii)``. Returns the maximum
    absolute mean and covariance deviations.
    """
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta={beta} outside (0, 1)")
    tilted, _ = damped_gaussian_tilt(prior, potential, beta)
    m, P = prior.mean, prior.cov
    d = prior.dim
    steps = h * np.sqrt(np.diag(P))

    with mpmath.workdps(50):

        def f(shift):
            return _tilt_log_z_mp(P, potential, beta, [mpmath.mpf(a) + s for a, s in zip(m, shift)])

        zero = [mpmath.mpf(0)] * d
        f0 = f(zero)
        grad = [None] * d
        hess = [[None] * d for _ in range(d)]
        for i in range(d):
            hi = mpmath.mpf(steps[i])
            ei = list(zero)
            ei[i] = hi
            mi = [-v for v in ei]
            fp, fm = f(ei), f(mi)
            grad[i] = (fp - fm) / (2 * hi)
            hess[i][i] = (fp - 2 * f0 + fm) / hi**2
            for j in range(i):
                hj = mpmath.mpf(steps[j])
                pp = list(zero)
                pp[i], pp[j] = hi, hj
                pm = list(zero)
                pm[i], pm[j] = hi, -hj
                mp_ = list(zero)
                mp_[i], mp_[j] = -hi, hj
                mm = list(zero)
                mm[i], mm[j] = -hi, -hj
                hess[i][j] = hess[j][i] = (f(pp) - f(pm) - f(mp_) + f(mm)) / (4 * hi * hj)
        grad = np.array([float(g) for g in grad])
        hess = np.array([[float(v) for v in row] for row in hess])
    mean_fd = m + P @ grad / beta
    cov_fd = P / beta + P @ hess @ P / beta**2
    mean_err = float(np.max(np.abs(mean_fd - tilted.mean)))
    cov_err = float(np.max(np.abs(cov_fd - tilted.cov)))
    return mean_err, cov_err


def marginalize_affine(marg: GaussianMarginal, cond: AffineGaussianConditional) -> GaussianMarginal:
    """Push ``marg`` through ``cond``: ``(F m + d, F P F' + Sigma)``."""
    F = cond.gain
    if F.shape[1] != marg.dim:
        raise DomainError("dimension mismatch")
    return GaussianMarginal(F @ marg.mean + cond.offset, F @ marg.cov @ F.T + cond.noise_cov)


def pairwise_joint(
    marg: GaussianMarginal, cond: AffineGaussianConditional
) -> tuple[GaussianMarginal, tuple[str, str]]:
    """Joint Gaussian over ``[child; parent]``.

    The tag names the slots: ``("next", "current")`` for a forward conditional,
    ``("previous", "current")`` for a reverse one.
    """
    child = marginalize_affine(marg, cond)
    cross = cond.gain @ marg.cov
    cov = np.block([[child.cov, cross], [cross.T, marg.cov]])
    tag = ("next", "current") if cond.direction == "forward" else ("previous", "current")
    return GaussianMarginal(np.concatenate([child.mean, marg.mean]), cov), tag


def expected_conditional_kl(
    marg: GaussianMarginal,
    new_cond: AffineGaussianConditional,
    old_cond: AffineGaussianConditional,
) -> float:
    """``E_{x ~ marg} KL(new(.|x) || old(.|x))`` in closed form."""
    if new_cond.direction != old_cond.direction:
        raise DomainError("conditionals have different directions")
    Ln = cholesky(new_cond.noise_cov, what="new noise_cov")
    Lo = cholesky(old_cond.noise_cov, what="old noise_cov")
    dF = new_cond.gain - old_cond.gain
    mu = dF @ marg.mean + new_cond.offset - old_cond.offset
    n = new_cond.offset.size
    trace = float(np.trace(chol_solve(Lo, new_cond.noise_cov)))
    quad = float(mu @ chol_solve(Lo, mu)) + float(np.trace(chol_solve(Lo, dF @ marg.cov @ dF.T)))
    kl = 0.5 * (trace + quad - n + chol_logdet(Lo) - chol_logdet(Ln))
    return max(kl, 0.0)


def affine_log_density_quadratic(A, b, W) -> JointQuadratic:
    """``log N(x_next | A x + b, W)`` as a joint quadratic."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = as_vector(b)
    L = cholesky(as_matrix(W, b.size), what="noise covariance")
    Winv = chol_inverse(L)
    WinvA = chol_solve(L, A)
    Winv_b = chol_solve(L, b)
    return JointQuadratic(
        block_nn=Winv,
        block_cc=symmetrize(A.T @ WinvA),
        block_nc=WinvA,
        lin_n=Winv_b,
        lin_c=-A.T @ Winv_b,
        constant=-0.5 * (b.size * LOG_2PI + chol_logdet(L)) - 0.5 * b @ Winv_b,
    )


def reverse_of_forward(
    marginals: list[GaussianMarginal], conditionals: list[AffineGaussianConditional]
) -> list[AffineGaussianConditional]:
    """Reverse-time kernels ``x_{k} | x_{k+1}`` of a forward Gauss-Markov chain.

    ``result[k]`` conditions ``x_k`` on ``x_{k+1}``.
    """
    out = []
    for k, cond in enumerate(conditionals):
        Pk, Pn = marginals[k].cov, marginals[k + 1].cov
        Ln = cholesky(Pn, what=f"marginal cov {k + 1}")
        cross = Pk @ cond.gain.T  # Cov[x_k, x_{k+1}]
        G = chol_solve(Ln, cross.T).T
        S = symmetrize(Pk - G @ cross.T)
        out.append(
            AffineGaussianConditional(G, marginals[k].mean - G @ marginals[k + 1].mean, S, "reverse")
        )
    return out


def forward_of_reverse(
    marginals: list[GaussianMarginal], conditionals: list[AffineGaussianConditional]
) -> list[AffineGaussianConditional]:
    """Forward kernels ``x_{k+1} | x_k`` of a reverse chain.

    ``conditionals[k-1]`` is the reverse kernel ``x_{k-1} | x_k``;
    ``result[k]`` conditions ``x_{k+1}`` on ``x_k``.
    """
    out = []
    for k, cond in enumerate(conditionals):
        Pn, Pk = marginals[k + 1].cov, marginals[k].cov
        Lk = cholesky(Pk, what=f"marginal cov {k}")
        cross = Pn @ cond.gain.T  # Cov[x_{k+1}, x_k]
        G = chol_solve(Lk, cross.T).T
        S = symmetrize(Pn - G @ cross.T)
        out.append(
            AffineGaussianConditional(G, marginals[k + 1].mean - G @ marginals[k].mean, S, "forward")
        )
    return out
