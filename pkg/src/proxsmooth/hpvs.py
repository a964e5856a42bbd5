"""Hybrid proximal variational smoother.

Runs the forward smoother's backward sweep and the reverse smoother's forward
sweep on the same expansion and damping, then fuses the forward normalizer
and the reverse potential at each interior step into the new marginal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from proxsmooth.damping import (
    DampingConfig,
    IterationRecord,
    SmootherResult,
    Stopwatch,
    cov_change,
    fixed_damping,
    mean_change,
    search_damping,
)
from proxsmooth.errors import DomainError, NotPositiveDefinite
from proxsmooth.expansions import ModelExpansion, expand_model, rule_factory
from proxsmooth.fpvs import (
    BackwardPassOutput,
    ForwardPosterior,
    evaluate_dual_forward,
    forward_backward_pass,
    forward_marginals,
    joint_kl_forward,
    prior_predictive_forward,
)
from proxsmooth.gaussian import (
    GaussianMarginal,
    QuadraticForm,
    chol_inverse,
    chol_solve,
    cholesky,
    pairwise_joint,
)
from proxsmooth.models import StateSpaceModel
from proxsmooth.rpvs import (
    ForwardPassOutput,
    ReversePosterior,
    reverse_forward_pass,
    reverse_from_forward,
    reverse_marginals,
)


@dataclass(frozen=True)
class HybridState:
    marginals: tuple[GaussianMarginal, ...]
    fwd_post: ForwardPosterior
    rev_post: ReversePosterior

    def __post_init__(self):
        margs = tuple(self.marginals)
        T = len(margs) - 1
        if self.fwd_post.horizon != T or self.rev_post.horizon != T:
            raise DomainError("HybridState lengths are inconsistent")
        object.__setattr__(self, "marginals", margs)

    @classmethod
    def from_forward(cls, post: ForwardPosterior) -> "HybridState":
        return cls(tuple(forward_marginals(post)), post, reverse_from_forward(post))


def hybrid_marginals(
    beta: float,
    prev_marginals: Sequence[GaussianMarginal],
    fwd_norms: Sequence[QuadraticForm],
    rev_pots: Sequence[QuadraticForm],
    fwd_boundary: GaussianMarginal,
    rev_boundary: GaussianMarginal,
) -> list[GaussianMarginal]:
    """Fuse the two sweeps into marginals ``k = 0..T``.

    ``fwd_norms[k]`` (k = 0..T-1) and ``rev_pots[k]`` (k = 0..T) are indexed
    by time; only interior ``0 < k < T`` are read. Each interior marginal has precision
    ``(1 - beta) R_k + S_k + beta P_k^-1``: the reverse potential carries the
    measurement and the past, the forward normalizer the future. Its
    ``(1 - beta)`` scaling is already inside ``S_k``.
    """
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta={beta} outside [0, 1)")
    T = len(prev_marginals) - 1
    a = 1.0 - beta
    out = [fwd_boundary]
    for k in range(1, T):
        prev = prev_marginals[k]
        Lp = cholesky(prev.cov, what=f"previous marginal cov {k}")
        Pinv = chol_inverse(Lp)
        U = a * rev_pots[k].curvature + fwd_norms[k].curvature + beta * Pinv
        u = a * rev_pots[k].linear + fwd_norms[k].linear + beta * chol_solve(Lp, prev.mean)
        try:
            L = cholesky(U, what="hybrid precision")
        except DomainError as exc:
            raise NotPositiveDefinite(k, "hybrid precision", str(exc)) from exc
        out.append(GaussianMarginal(chol_solve(L, u), chol_inverse(L)))
    if T >= 1:
        out.append(rev_boundary)
    return out


@dataclass(frozen=True)
class HybridStep:
    forward: BackwardPassOutput
    reverse: ForwardPassOutput
    marginals: list[GaussianMarginal]


def hybrid_step(beta: float, expansion: ModelExpansion, state: HybridState, jitter: float = 0.0) -> HybridStep:
    """Both sweeps at one ``beta`` followed by the fusion.

    The sweeps read only ``expansion`` and ``state``, so their order does not
    matter.
    """
    fwd = forward_backward_pass(beta, expansion, state.fwd_post, jitter)
    rev = reverse_forward_pass(beta, expansion, state.rev_post, jitter)
    margs = hybrid_marginals(
        beta,
        state.marginals,
        fwd.normalizers,
        rev.potentials,
        fwd.posterior.first,
        rev.posterior.last,
    )
    return HybridStep(fwd, rev, margs)


def _drift(a: Sequence[GaussianMarginal], b: Sequence[GaussianMarginal]) -> float:
    return max(float(np.max(np.abs(x.mean - y.mean))) for x, y in zip(a, b))


def run_hpvs(
    model: StateSpaceModel,
    observations,
    method: str = "gslr",
    rule=None,
    cfg: DampingConfig | None = None,
    init: HybridState | None = None,
    max_iters: int = 50,
    conv_tol: float = 1e-6,
    fixed_beta: float | None = None,
    record_timing: bool = False,
) -> SmootherResult[HybridState]:
    """Outer loop of the hybrid smoother.

    ``beta`` is chosen with the forward trust region, the KL between the new
    and old forward chains. A candidate ``beta`` whose reverse sweep or fusion
    is not positive definite is treated like a violated trust region.
    Each record's ``extra`` holds ``fwd_rev_drift``: the largest mean gap
    between the stored forward and reverse chains, which share a joint only
    approximately after the first iteration.
    """
    Y = np.asarray(observations, dtype=float).reshape(-1, model.dim_y)
    T = Y.shape[0]
    rules = rule_factory() if rule is None else rule
    cfg = cfg or DampingConfig.default(T, model.dim_x)
    state = init or HybridState.from_forward(prior_predictive_forward(model, T, rules))
    if len(state.marginals) != T + 1:
        raise DomainError("init horizon does not match observations")
    margs = list(state.marginals)
    trace, betas, kls, records = [margs], [], [], []
    converged = False
    clock = Stopwatch(record_timing)
    for it in range(max_iters):
        joints = [pairwise_joint(margs[k], c)[0] for k, c in enumerate(state.fwd_post.conditionals)]
        expansion = expand_model(model, Y, margs, joints, method, rules)
        run = lambda beta: hybrid_step(beta, expansion, state, cfg.jitter)  # noqa: E731
        kl = lambda step: joint_kl_forward(step.forward.posterior, state.fwd_post)  # noqa: E731
        res = fixed_damping(fixed_beta, run, kl) if fixed_beta is not None else search_damping(cfg, run, kl)
        step = res.output
        new_margs = step.marginals
        change = mean_change(new_margs, margs)
        drift = _drift(forward_marginals(step.forward.posterior), reverse_marginals(step.reverse.posterior))
        records.append(
            IterationRecord(
                iter=it + 1,
                beta=res.beta,
                kl=res.kl,
                epsilon=cfg.epsilon,
                log_Z_boundary=step.forward.log_Z0,
                dual_value=evaluate_dual_forward(res.beta, step.forward.log_Z0, cfg.epsilon),
                max_mean_change=change,
                max_cov_change=cov_change(new_margs, margs),
                branch=res.branch,
                evaluations=res.evaluations,
                wall_ms=clock.ms(),
                extra={"fwd_rev_drift": drift},
            )
        )
        state = HybridState(tuple(new_margs), step.forward.posterior, step.reverse.posterior)
        margs = new_margs
        trace.append(margs)
        betas.append(res.beta)
        kls.append(res.kl)
        if change <= conv_tol:
            converged = True
            break
    return SmootherResult(trace, betas, kls, state, records, converged)
