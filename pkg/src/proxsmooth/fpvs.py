"""Forward proximal variational smoother.

The posterior is a forward Gauss-Markov chain ``q(x_0) prod_k q(x_{k+1} | x_k)``.
Each iteration expands the model around the current marginals, picks the
damping ``beta`` that puts the new chain at KL distance ``epsilon`` from the
old one, and solves the damped problem exactly with one backward sweep.
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
from proxsmooth.expansions import ModelExpansion, expand_model, floor_noise_cov, gslr, rule_factory
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
    pairwise_joint,
    symmetrize,
)
from proxsmooth.models import StateSpaceModel


@dataclass(frozen=True)
class ForwardPosterior:
    """``first`` is ``q(x_0)``; ``conditionals[k]`` is ``q(x_{k+1} | x_k)``."""

    first: GaussianMarginal
    conditionals: tuple[AffineGaussianConditional, ...]

    def __post_init__(self):
        conds = tuple(self.conditionals)
        if any(c.direction != "forward" for c in conds):
            raise DomainError("ForwardPosterior needs forward conditionals")
        object.__setattr__(self, "conditionals", conds)

    @property
    def horizon(self) -> int:
        return len(self.conditionals)


@dataclass(frozen=True)
class BackwardPassOutput:
    posterior: ForwardPosterior
    potentials: tuple[QuadraticForm, ...]  # k = 0..T
    normalizers: tuple[QuadraticForm, ...]  # k = 0..T-1
    log_Z0: float
    beta: float
    blocks: tuple[WorkingBlocks, ...] = ()


def _conditional_terms(cond: AffineGaussianConditional, k: int):
    """``Sigma^-1``, ``Sigma^-1 F``, ``Sigma^-1 d``, ``log|2 pi Sigma|`` and ``d' Sigma^-1 d``."""
    try:
        L = cholesky(cond.noise_cov, what="previous conditional cov")
    except DomainError as exc:
        raise NotPositiveDefinite(k, "Sigma_prev", str(exc)) from exc
    Sinv = chol_inverse(L)
    SinvF = chol_solve(L, cond.gain)
    Sinv_d = chol_solve(L, cond.offset)
    logdet = cond.offset.size * LOG_2PI + chol_logdet(L)
    return Sinv, SinvF, Sinv_d, logdet, float(cond.offset @ Sinv_d)


def forward_backward_pass(
    beta: float,
    expansion: ModelExpansion,
    prev: ForwardPosterior,
    jitter: float = 0.0,
) -> BackwardPassOutput:
    """Solve the damped subproblem by a backward sweep over ``k = T-1..0``.

    Raises
    ------
    NotPositiveDefinite
        When a working precision ``G_nn`` or the boundary tilt fails Cholesky.
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
    potentials[T] = expansion.site(T)
    for k in range(T - 1, -1, -1):
        C = expansion.dyn[k]
        V = potentials[k + 1]
        F = prev.conditionals[k].gain
        Sinv, SinvF, Sinv_d, logdet, dSd = _conditional_terms(prev.conditionals[k], k)
        Gnn = symmetrize(a * (C.block_nn + V.curvature) + beta * Sinv)
        Gcc = symmetrize(a * C.block_cc + beta * F.T @ SinvF)
        Gnc = a * C.block_nc + beta * SinvF
        gn = a * (C.lin_n + V.linear) + beta * Sinv_d
        gc = a * C.lin_c - beta * F.T @ Sinv_d
        theta = a * (C.constant + V.constant) - 0.5 * beta * logdet - 0.5 * beta * dSd
        blocks[k] = WorkingBlocks(Gnn, Gcc, Gnc, gn, gc, theta)
        try:
            L = cholesky(Gnn, what="G_nn")
        except DomainError as exc:
            raise NotPositiveDefinite(k, "G_nn", str(exc)) from exc
        Sigma = chol_inverse(L)
        Fn = chol_solve(L, Gnc)
        dn = chol_solve(L, gn)
        d = gn.size
        normalizers[k] = QuadraticForm(
            symmetrize(Gcc - Gnc.T @ Fn),
            gc + Gnc.T @ dn,
            theta + 0.5 * (d * LOG_2PI - chol_logdet(L)) + 0.5 * gn @ dn,
        )
        potentials[k] = expansion.site(k) + normalizers[k].scale(1.0 / a)
        conds[k] = AffineGaussianConditional(Fn, dn, Sigma, "forward")
    try:
        first, log_Z0 = damped_gaussian_tilt(prev.first, potentials[0], beta, jitter=jitter)
    except NotIntegrableError as exc:
        raise NotPositiveDefinite(0, "J_xx", str(exc)) from exc
    return BackwardPassOutput(
        ForwardPosterior(first, tuple(conds)), tuple(potentials), tuple(normalizers), log_Z0, beta, tuple(blocks)
    )


def forward_marginals(post: ForwardPosterior) -> list[GaussianMarginal]:
    out = [post.first]
    for cond in post.conditionals:
        out.append(marginalize_affine(out[-1], cond))
    return out


def forward_joints(post: ForwardPosterior, marginals: Sequence[GaussianMarginal] | None = None) -> list[GaussianMarginal]:
    """Gaussians over ``[x_{k+1}; x_k]`` implied by the chain (or by given marginals)."""
    margs = forward_marginals(post) if marginals is None else marginals
    return [pairwise_joint(margs[k], c)[0] for k, c in enumerate(post.conditionals)]


def joint_kl_forward(new: ForwardPosterior, old: ForwardPosterior) -> float:
    """``KL(new || old)`` of two forward chains, via the chain rule."""
    if new.horizon != old.horizon:
        raise DomainError("horizons differ")
    margs = forward_marginals(new)
    kl = gaussian_kl(new.first, old.first)
    for k in range(new.horizon):
        kl += expected_conditional_kl(margs[k], new.conditionals[k], old.conditionals[k])
    return float(kl)


def evaluate_dual_forward(beta: float, log_Z0: float, epsilon: float) -> float:
    """Dual objective ``beta eps / (1 - beta) + log Z_0 / (1 - beta)``."""
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta={beta} outside [0, 1)")
    return (beta * epsilon + log_Z0) / (1.0 - beta)


def optimal_damping_forward(
    cfg: DampingConfig, expansion: ModelExpansion, prev: ForwardPosterior
) -> DampingResult[BackwardPassOutput]:
    """Pick ``beta`` so that ``KL(new || prev)`` matches ``cfg.epsilon``."""
    return search_damping(
        cfg,
        lambda beta: forward_backward_pass(beta, expansion, prev, cfg.jitter),
        lambda out: joint_kl_forward(out.posterior, prev),
    )


def prior_predictive_forward(model: StateSpaceModel, horizon: int, rule=None) -> ForwardPosterior:
    """Moment-matched prior pushed through GSLR linearizations of the dynamics."""
    rules = rule_factory() if rule is None else rule
    marg = model.prior
    conds = []
    for k in range(horizon):
        reg = gslr(
            lambda x, k=k: model.dyn_cond_mean(k, x),
            lambda x, k=k: model.dyn_cond_cov(k, x),
            marg,
            rules(model.dim_x),
        )
        cond = AffineGaussianConditional(reg.gain, reg.offset, floor_noise_cov(reg.noise_cov), "forward")
        conds.append(cond)
        marg = marginalize_affine(marg, cond)
    return ForwardPosterior(model.prior, tuple(conds))


def run_fpvs(
    model: StateSpaceModel,
    observations,
    method: str = "gslr",
    rule=None,
    cfg: DampingConfig | None = None,
    init: ForwardPosterior | None = None,
    max_iters: int = 50,
    conv_tol: float = 1e-6,
    fixed_beta: float | None = None,
    record_timing: bool = False,
) -> SmootherResult[ForwardPosterior]:
    """Outer loop of the forward smoother.

    Parameters
    ----------
    method
        Expansion route: ``"gslr"``, ``"fourier_hermite"`` or ``"exact"``.
    rule
        ``dim -> QuadratureRule`` factory (see :func:`rule_factory`).
    cfg
        Damping settings; defaults to :meth:`DampingConfig.default`.
    fixed_beta
        Skip the damping search and use this ``beta`` every iteration.
    """
    Y = np.asarray(observations, dtype=float).reshape(-1, model.dim_y)
    T = Y.shape[0]
    rules = rule_factory() if rule is None else rule
    cfg = cfg or DampingConfig.default(T, model.dim_x)
    post = init or prior_predictive_forward(model, T, rules)
    if post.horizon != T:
        raise DomainError("init horizon does not match observations")
    margs = forward_marginals(post)
    trace, betas, kls, records = [margs], [], [], []
    converged = False
    clock = Stopwatch(record_timing)
    for it in range(max_iters):
        expansion = expand_model(model, Y, margs, forward_joints(post, margs), method, rules)
        run = lambda beta: forward_backward_pass(beta, expansion, post, cfg.jitter)  # noqa: E731
        kl = lambda out: joint_kl_forward(out.posterior, post)  # noqa: E731
        res = fixed_damping(fixed_beta, run, kl) if fixed_beta is not None else search_damping(cfg, run, kl)
        new_post = res.output.posterior
        new_margs = forward_marginals(new_post)
        change = mean_change(new_margs, margs)
        records.append(
            IterationRecord(
                iter=it + 1,
                beta=res.beta,
                kl=res.kl,
                epsilon=cfg.epsilon,
                log_Z_boundary=res.output.log_Z0,
                dual_value=evaluate_dual_forward(res.beta, res.output.log_Z0, cfg.epsilon),
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
