"""Reverse proximal variational smoother.

Mirror image of :mod:`proxsmooth.fpvs`: the posterior is a reverse chain
``q(x_T) prod_k q(x_{k-1} | x_k)``, potentials are swept forward in time from
the prior, and the boundary update acts on ``x_T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from proxsmooth.damping import (
    DampingConfig,
    DampingResult,
    IterationRecord,
    SmootherResult,
    Stopwatch,
    cov_change,
    fixed_damping,
    mean_change,
    search_damping,
)
from proxsmooth.errors import DomainError, NotIntegrableError, NotPositiveDefinite
from proxsmooth.expansions import ModelExpansion, expand_model, rule_factory
from proxsmooth.fpvs import _conditional_terms, forward_marginals, prior_predictive_forward
from proxsmooth.gaussian import (
    LOG_2PI,
    AffineGaussianConditional,
    GaussianMarginal,
    QuadraticForm,
    WorkingBlocks,
    chol_inverse,
    chol_logdet,
    chol_solve,
    cholesky,
    damped_gaussian_tilt,
    expected_conditional_kl,
    gaussian_kl,
    marginalize_affine,
    reverse_of_forward,
    symmetrize,
)
from proxsmooth.models import StateSpaceModel


@dataclass(frozen=True)
class ReversePosterior:
    """``last`` is ``q(x_T)``; ``conditionals[k]`` is ``q(x_k | x_{k+1})`` for k=0..T-1."""

    last: GaussianMarginal
    conditionals: tuple[AffineGaussianConditional, ...]

    def __post_init__(self):
        conds = tuple(self.conditionals)
        if any(c.direction != "reverse" for c in conds):
            raise DomainError("ReversePosterior needs reverse conditionals")
        object.__setattr__(self, "conditionals", conds)

    @property
    def horizon(self) -> int:
        return len(self.conditionals)


@dataclass(frozen=True)
class ForwardPassOutput:
    posterior: ReversePosterior
    potentials: tuple[QuadraticForm, ...]  # k = 0..T
    normalizers: tuple[QuadraticForm, ...]  # normalizers[k-1] for k = 1..T
    log_ZT: float
    beta: float
    blocks: tuple[WorkingBlocks, ...] = ()


def reverse_forward_pass(
    beta: float,
    expansion: ModelExpansion,
    prev: ReversePosterior,
    jitter: float = 0.0,
) -> ForwardPassOutput:
    """Solve the damped subproblem by a forward sweep over ``k = 1..T``.

    At step ``k`` the variable integrated out is ``x_{k-1}`` ("current" in the
    dynamics quadratic) and the kept one is ``x_k`` ("next").

    Raises
    ------
    NotPositiveDefinite
        When a working precision ``G_cc`` or the boundary tilt fails Cholesky.
    """
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta={beta} outside [0, 1)")
    T = prev.horizon
    if expansion.horizon != T:
        raise DomainError("expansion and posterior horizons differ")
    a = 1.0 - beta
    potentials: list[QuadraticForm] = [None] * (T + 1)
    normalizers: list[QuadraticForm] = [None] * T
    conds: list[AffineGaussianConditional] = [None] * T
    blocks: list[WorkingBlocks] = [None] * T
    potentials[0] = expansion.site(0)
    for k in range(1, T + 1):
        C = expansion.dyn[k - 1]
        V = potentials[k - 1]
        F = prev.conditionals[k - 1].gain
        Sinv, SinvF, Sinv_d, logdet, dSd = _conditional_terms(prev.conditionals[k - 1], k)
        Gnn = symmetrize(a * C.block_nn + beta * F.T @ SinvF)
        Gcc = symmetrize(a * (C.block_cc + V.curvature) + beta * Sinv)
        Gcn = a * C.block_cn + beta * SinvF
        gn = a * C.lin_n - beta * F.T @ Sinv_d
        gc = a * (C.lin_c + V.linear) + beta * Sinv_d
        theta = a * (C.constant + V.constant) - 0.5 * beta * logdet - 0.5 * beta * dSd
        blocks[k - 1] = WorkingBlocks(Gnn, Gcc, Gcn.T, gn, gc, theta)
        try:
            L = cholesky(Gcc, what="G_cc")
        except DomainError as exc:
            raise NotPositiveDefinite(k, "G_cc", str(exc)) from exc
        Sigma = chol_inverse(L)
        Fc = chol_solve(L, Gcn)
        dc = chol_solve(L, gc)
        d = gc.size
        normalizers[k - 1] = QuadraticForm(
            symmetrize(Gnn - Gcn.T @ Fc),
            gn + Gcn.T @ dc,
            theta + 0.5 * (d * LOG_2PI - chol_logdet(L)) + 0.5 * gc @ dc,
        )
        potentials[k] = expansion.site(k) + normalizers[k - 1].scale(1.0 / a)
        conds[k - 1] = AffineGaussianConditional(Fc, dc, Sigma, "reverse")
    try:
        last, log_ZT = damped_gaussian_tilt(prev.last, potentials[T], beta, jitter=jitter)
    except NotIntegrableError as exc:
        raise NotPositiveDefinite(T, "J_xx", str(exc)) from exc
    return ForwardPassOutput(
        ReversePosterior(last, tuple(conds)), tuple(potentials), tuple(normalizers), log_ZT, beta, tuple(blocks)
    )


def reverse_marginals(post: ReversePosterior) -> list[GaussianMarginal]:
    out = [post.last]
    for cond in reversed(post.conditionals):
        out.append(marginalize_affine(out[-1], cond))
    return out[::-1]


def reverse_joints(post: ReversePosterior, marginals: Sequence[GaussianMarginal] | None = None) -> list[GaussianMarginal]:
    """Gaussians over ``[x_{k+1}; x_k]`` implied by the reverse chain."""
    margs = reverse_marginals(post) if marginals is None else marginals
    out = []
    for k, c in enumerate(post.conditionals):
        nxt = margs[k + 1]
        cross = nxt.cov @ c.gain.T  # Cov[x_{k+1}, x_k]
        prev = marginalize_affine(nxt, c)
        out.append(
            GaussianMarginal(
                np.concatenate([nxt.mean, prev.mean]),
                np.block([[nxt.cov, cross], [cross.T, prev.cov]]),
            )
        )
    return out


def joint_kl_reverse(new: ReversePosterior, old: ReversePosterior) -> float:
    """``KL(new || old)`` of two reverse chains, via the chain rule."""
    if new.horizon != old.horizon:
        raise DomainError("horizons differ")
    margs = reverse_marginals(new)
    kl = gaussian_kl(new.last, old.last)
    for k in range(new.horizon):
        kl += expected_conditional_kl(margs[k + 1], new.conditionals[k], old.conditionals[k])
    return float(kl)


def evaluate_dual_reverse(beta: float, log_ZT: float, epsilon: float) -> float:
    """Dual objective ``beta eps / (1 - beta) + log Z_T / (1 - beta)``."""
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta={beta} outside [0, 1)")
    return (beta * epsilon + log_ZT) / (1.0 - beta)


def optimal_damping_reverse(
    cfg: DampingConfig, expansion: ModelExpansion, prev: ReversePosterior
) -> DampingResult[ForwardPassOutput]:
    return search_damping(
        cfg,
        lambda beta: reverse_forward_pass(beta, expansion, prev, cfg.jitter),
        lambda out: joint_kl_reverse(out.posterior, prev),
    )


def reverse_from_forward(post) -> ReversePosterior:
    """The same joint Gaussian written as a reverse chain."""
    margs = forward_marginals(post)
    return ReversePosterior(margs[-1], tuple(reverse_of_forward(margs, list(post.conditionals))))


def prior_predictive_reverse(model: StateSpaceModel, horizon: int, rule=None) -> ReversePosterior:
    return reverse_from_forward(prior_predictive_forward(model, horizon, rule))


def run_rpvs(
    model: StateSpaceModel,
    observations,
    method: str = "gslr",
    rule=None,
    cfg: DampingConfig | None = None,
    init: ReversePosterior | None = None,
    max_iters: int = 50,
    conv_tol: float = 1e-6,
    fixed_beta: float | None = None,
    record_timing: bool = False,
) -> SmootherResult[ReversePosterior]:
    """Outer loop of the reverse smoother; arguments as in :func:`run_fpvs`."""
    Y = np.asarray(observations, dtype=float).reshape(-1, model.dim_y)
    T = Y.shape[0]
    rules = rule_factory() if rule is None else rule
    cfg = cfg or DampingConfig.default(T, model.dim_x)
    post = init or prior_predictive_reverse(model, T, rules)
    if post.horizon != T:
        raise DomainError("init horizon does not match observations")
    margs = reverse_marginals(post)
    trace, betas, kls, records = [margs], [], [], []
    converged = False
    clock = Stopwatch(record_timing)
    for it in range(max_iters):
        expansion = expand_model(model, Y, margs, reverse_joints(post, margs), method, rules)
        run = lambda beta: reverse_forward_pass(beta, expansion, post, cfg.jitter)  # noqa: E731
        kl = lambda out: joint_kl_reverse(out.posterior, post)  # noqa: E731
        res = fixed_damping(fixed_beta, run, kl) if fixed_beta is not None else search_damping(cfg, run, kl)
        new_post = res.output.posterior
        new_margs = reverse_marginals(new_post)
        change = mean_change(new_margs, margs)
        records.append(
            IterationRecord(
                iter=it + 1,
                beta=res.beta,
                kl=res.kl,
                epsilon=cfg.epsilon,
                log_Z_boundary=res.output.log_ZT,
                dual_value=evaluate_dual_reverse(res.beta, res.output.log_ZT, cfg.epsilon),
                max_mean_change=change,
                max_cov_change=cov_change(new_margs, margs),
                branch=res.branch,
                evaluations=res.evaluations,
                wall_ms=clock.ms(),
            )
        )
        post, margs = new_post, new_margs
        trace.append(margs)
        betas.append(res.beta)
        kls.append(res.kl)
        if change <= conv_tol:
            converged = True
            break
    return SmootherResult(trace, betas, kls, post, records, converged)
