"""Proximal variational smoothers for nonlinear state-space models.

Forward, reverse and hybrid Gauss-Markov smoothers with KL trust-region
damping, GSLR and Fourier-Hermite expansions, and Kalman/RTS and grid
reference smoothers.
"""

from proxsmooth.baseline import RtsResult, grid_smoother_1d, kalman_rts
from proxsmooth.damping import DampingConfig, DampingResult, IterationRecord, SmootherResult
from proxsmooth.errors import (
    CapacityError,
    DomainError,
    EvaluationError,
    GridTooSmallError,
    NoFeasibleDamping,
    NotIntegrableError,
    NotPositiveDefinite,
    ParseError,
    ValidationError,
)
from proxsmooth.expansions import (
    AffineRegression,
    ModelExpansion,
    expand_model,
    fourier_hermite,
    gslr,
    regression_to_dyn_quadratic,
    regression_to_meas_quadratic,
    rule_factory,
)
from proxsmooth.fpvs import (
    BackwardPassOutput,
    ForwardPosterior,
    evaluate_dual_forward,
    forward_backward_pass,
    forward_marginals,
    joint_kl_forward,
    optimal_damping_forward,
    run_fpvs,
)
from proxsmooth.gaussian import (
    AffineGaussianConditional,
    GaussianMarginal,
    JointQuadratic,
    QuadraticForm,
    damped_gaussian_tilt,
    gaussian_kl,
    log_integral_quadratic,
    tilt_moment_check,
)
from proxsmooth.hpvs import HybridState, hybrid_marginals, run_hpvs
from proxsmooth.models import (
    StateSpaceModel,
    Trajectory,
    linear_gaussian_model,
    pendulum_model,
    simulate,
    stochastic_volatility_model,
)
from proxsmooth.quadrature import QuadratureRule, expect, gauss_hermite_rule, unscented_rule
from proxsmooth.rpvs import (
    ForwardPassOutput,
    ReversePosterior,
    evaluate_dual_reverse,
    joint_kl_reverse,
    optimal_damping_reverse,
    reverse_forward_pass,
    reverse_marginals,
    run_rpvs,
)

__version__ = "0.1.0"
