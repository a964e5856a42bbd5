"""Gaussian expectation rules: tensor Gauss-Hermite and unscented sigma points."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from proxsmooth.errors import CapacityError, DomainError
from proxsmooth.gaussian import GaussianMarginal, cholesky

MAX_NODES = 10**6


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes in unit (standard normal) space and weights summing to one."""

    nodes: np.ndarray  # (n, dim)
    weights: np.ndarray  # (n,)
    name: str = ""

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if nodes.shape[0] != weights.size:
            raise DomainError("nodes and weights differ in length")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def __len__(self) -> int:
        return self.weights.size


def gauss_hermite_rule(order: int, dim: int) -> QuadratureRule:
    """Tensor-product probabilists' Gauss-Hermite rule under ``N(0, I)``.

    Exact for polynomials of degree ``<= 2*order - 1`` in each coordinate.
    """
    if order < 1 or dim < 1:
        raise DomainError("order and dim must be >= 1")
    if order**dim > MAX_NODES:
        raise CapacityError(f"{order}^{dim} nodes exceeds {MAX_NODES}")
    x, w = np.polynomial.hermite_e.hermegauss(order)
    # enforce the exact mirror symmetry so odd moments vanish identically
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    # renormalize away the last-ulp drift of the tensor product
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights, name=f"gauss_hermite({order})")


def unscented_rule(dim: int, alpha: float = 1.0, beta_u: float = 2.0, kappa: float = 2.0) -> QuadratureRule:
    """The ``2*dim + 1`` scaled unscented points with mean weights.

    ``beta_u`` only changes the covariance weight of the central point and so
    does not enter a single-weight expectation rule; it is accepted for
    interface symmetry.
    """
    lam = alpha**2 * (dim + kappa) - dim
    if abs(lam + dim) < 1e-12:
        raise DomainError("unscented scaling gives lambda + dim = 0")
    c = np.sqrt(dim + lam)
    eye = np.eye(dim)
    nodes = np.vstack([np.zeros(dim), c * eye, -c * eye])
    w0 = lam / (dim + lam)
    wi = 1.0 / (2.0 * (dim + lam))
    weights = np.concatenate([[w0], np.full(2 * dim, wi)])
    return QuadratureRule(nodes, weights, name=f"unscented({alpha},{beta_u},{kappa})")


def default_rule(dim: int) -> QuadratureRule:
    """Gauss-Hermite 5 up to dim 3, Gauss-Hermite 3 up to dim 6, unscented above."""
    if dim <= 3:
        return gauss_hermite_rule(5, dim)
    if dim <= 6:
        return gauss_hermite_rule(3, dim)
    return unscented_rule(dim)


def make_rule(kind: str, order: int | None, dim: int) -> QuadratureRule:
    if kind == "default":
        return default_rule(dim)
    if kind == "gauss_hermite":
        return gauss_hermite_rule(order or 5, dim)
    if kind == "unscented":
        return unscented_rule(dim)
    raise DomainError(f"unknown quadrature kind {kind!r}")


def sigma_points(rule: QuadratureRule, marg: GaussianMarginal, sqrt: np.ndarray | None = None) -> np.ndarray:
    """Map unit-space nodes to ``m + S z`` with ``S`` a square root of ``P``."""
    if rule.dim != marg.dim:
        raise DomainError(f"rule dim {rule.dim} != marginal dim {marg.dim}")
    S = cholesky(marg.cov, what="marginal cov") if sqrt is None else sqrt
    return marg.mean + rule.nodes @ S.T


def expect(
    rule: QuadratureRule,
    marg: GaussianMarginal,
    f: Callable[[np.ndarray], np.ndarray],
    sqrt: np.ndarray | None = None,
) -> np.ndarray:
    """``sum_i w_i f(m + S z_i)``; the output has the shape of ``f``'s output."""
    X = sigma_points(rule, marg, sqrt)
    vals = np.array([np.asarray(f(x), dtype=float) for x in X])
    return np.tensordot(rule.weights, vals, axes=1)
