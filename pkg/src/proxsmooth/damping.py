"""Trust-region damping search and iteration bookkeeping shared by the smoothers."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Generic, TypeVar

import numpy as np

from proxsmooth.errors import DomainError, NoFeasibleDamping, NotIntegrableError
from proxsmooth.gaussian import GaussianMarginal

Out = TypeVar("Out")


@dataclass(frozen=True)
class DampingConfig:
    """Settings of the geometric bisection on ``alpha``, with ``beta = alpha / (1 + alpha)``.

    ``jitter`` is a relative diagonal regularizer for the boundary tilt; it is
    0 by default and capped at ``1e-9`` by :func:`proxsmooth.gaussian.cholesky`.
    """

    epsilon: float
    alpha_min: float = 1e-4
    alpha_max: float = 1e6
    alpha_init: float = 1.0
    kl_rel_tol: float = 1e-2
    max_bisect: int = 60
    jitter: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not 0 < self.alpha_min < self.alpha_init < self.alpha_max:
            raise DomainError("need 0 < alpha_min < alpha_init < alpha_max")
        if not 0 < self.kl_rel_tol < 1:
            raise DomainError("kl_rel_tol must lie in (0, 1)")
        if self.max_bisect < 1:
            raise DomainError("max_bisect must be >= 1")

    @classmethod
    def default(cls, horizon: int, dim: int, **overrides) -> "DampingConfig":
        """``epsilon = 0.1 (T + 1) d``: the radius grows with the joint dimension."""
        overrides.setdefault("epsilon", 0.1 * (horizon + 1) * dim)
        return cls(**overrides)


@dataclass(frozen=True)
class DampingResult(Generic[Out]):
    """Outcome of one damping search.

    ``branch`` is ``"root"`` when ``|KL - eps| <= tol * eps``, ``"slack"`` when
    the constraint is inactive at ``alpha_min``, ``"fixed"`` for a prescribed
    beta, and ``"best"`` / ``"max"`` for the fallbacks after the bisection
    budget is spent.
    """

    beta: float
    alpha: float
    kl: float
    output: Out
    branch: str
    evaluations: int


def beta_of_alpha(alpha: float) -> float:
    return alpha / (1.0 + alpha)


def search_damping(
    cfg: DampingConfig,
    run_pass: Callable[[float], Out],
    kl_of: Callable[[Out], float],
) -> DampingResult[Out]:
    """Geometric bisection on ``alpha`` until the KL step size matches ``epsilon``.

    A pass that fails with a non-integrable block counts as a violation of the
    trust region, so ``alpha`` (and thus ``beta``) grows.
    """
    eps, tol = cfg.epsilon, cfg.kl_rel_tol
    evaluations = 0

    def attempt(alpha):
        nonlocal evaluations
        evaluations += 1
        beta = beta_of_alpha(alpha)
        try:
            out = run_pass(beta)
            kl = float(kl_of(out))
        except NotIntegrableError:
            return beta, None, math.inf
        return beta, out, kl

    lo, hi = cfg.alpha_min, cfg.alpha_max
    alpha = cfg.alpha_init
    best = None
    for _ in range(cfg.max_bisect):
        beta, out, kl = attempt(alpha)
        if out is not None and abs(eps - kl) <= tol * eps:
            return DampingResult(beta, alpha, kl, out, "root", evaluations)
        if kl < eps:
            if best is None or alpha < best[0]:
                best = (alpha, beta, kl, out)
            if lo == cfg.alpha_min and alpha > cfg.alpha_min:
                # slack at the smallest admissible alpha: the constraint is inactive
                b0, o0, k0 = attempt(cfg.alpha_min)
                if o0 is not None and k0 <= eps * (1 + tol):
                    branch = "slack" if k0 < eps * (1 - tol) else "root"
                    return DampingResult(b0, cfg.alpha_min, k0, o0, branch, evaluations)
                lo = cfg.alpha_min * (1 + 1e-12)
            hi = alpha
            alpha = math.sqrt(alpha * lo)
        else:
            lo = alpha
            alpha = math.sqrt(alpha * hi)
    if best is not None:
        a, b, k, o = best
        return DampingResult(b, a, k, o, "best", evaluations)
    beta, out, kl = attempt(cfg.alpha_max)
    if out is None:
        raise NoFeasibleDamping(f"alpha_max={cfg.alpha_max} still gives a non-integrable update")
    return DampingResult(beta, cfg.alpha_max, kl, out, "max", evaluations)


def fixed_damping(beta: float, run_pass: Callable[[float], Out], kl_of: Callable[[Out], float]) -> DampingResult[Out]:
    out = run_pass(beta)
    alpha = beta / (1.0 - beta)
    return DampingResult(beta, alpha, float(kl_of(out)), out, "fixed", 1)


# ------------------------------------------------------------------- bookkeeping


def mean_change(new: list[GaussianMarginal], old: list[GaussianMarginal]) -> float:
    """``max_k ||m_new - m_old|| / (1 + ||m_old||)``."""
    return max(
        float(np.linalg.norm(a.mean - b.mean) / (1.0 + np.linalg.norm(b.mean))) for a, b in zip(new, old)
    )


def cov_change(new: list[GaussianMarginal], old: list[GaussianMarginal]) -> float:
    return max(
        float(np.linalg.norm(a.cov - b.cov) / (1.0 + np.linalg.norm(b.cov))) for a, b in zip(new, old)
    )


@dataclass(frozen=True)
class IterationRecord:
    """Per-iteration diagnostics; ``wall_ms`` is ``None`` unless timing was requested."""

    iter: int
    beta: float
    kl: float
    epsilon: float
    log_Z_boundary: float
    dual_value: float
    max_mean_change: float
    max_cov_change: float
    branch: str
    evaluations: int
    wall_ms: float | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


@dataclass
class SmootherResult(Generic[Out]):
    """Traces of an outer loop and its final posterior."""

    marginals_trace: list[list[GaussianMarginal]]
    beta_trace: list[float]
    kl_trace: list[float]
    posterior: Out
    records: list[IterationRecord]
    converged: bool

    @property
    def marginals(self) -> list[GaussianMarginal]:
        return self.marginals_trace[-1]

    @property
    def iterations(self) -> int:
        return len(self.records)


class Stopwatch:
    """Milliseconds since construction, or ``None`` when disabled."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter() if enabled else 0.0

    def ms(self) -> float | None:
        return (time.perf_counter() - self.t0) * 1e3 if self.enabled else None
