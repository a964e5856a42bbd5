import numpy as np
import pytest
from scipy.stats import norm

from proxsmooth.baseline import grid_smoother_1d, kalman_rts
from proxsmooth.errors import DomainError, GridTooSmallError
from proxsmooth.models import (
    LinearGaussianModel,
    linear_gaussian_model,
    random_linear_model,
    random_walk_model,
    simulate,
    stochastic_volatility_model,
)


def test_random_walk_hand_example():
    r = kalman_rts(random_walk_model(), [[1.0]])
    assert r.predicted[0].mean[0] == pytest.approx(0.0) and r.predicted[0].cov[0, 0] == pytest.approx(2.0)
    f1 = r.filtered[1]
    assert (f1.mean[0], f1.cov[0, 0]) == pytest.approx((2 / 3, 2 / 3), abs=1e-14)
    s0, s1 = r.smoothed
    assert (s0.mean[0], s0.cov[0, 0]) == pytest.approx((1 / 3, 2 / 3), abs=1e-14)
    assert (s1.mean[0], s1.cov[0, 0]) == pytest.approx((2 / 3, 2 / 3), abs=1e-14)
    assert r.log_likelihood == pytest.approx(norm.logpdf(1.0, 0.0, np.sqrt(3.0)), abs=1e-12)


def test_exact_observation_limit():
    m = linear_gaussian_model(1.0, 0.0, 1.0, 1.0, 0.0, 1e-12, 0.0, 1.0)
    r = kalman_rts(m, [[0.8]])
    assert r.smoothed[1].mean[0] == pytest.approx(0.8, abs=1e-9)


def test_uninformative_measurements_give_prior():
    m = linear_gaussian_model([[0.9]], [0.1], [[0.5]], [[0.0]], [0.0], [[1.0]], [0.3], [[2.0]])
    r = kalman_rts(m, [[5.0], [-3.0], [1.0]])
    mean, var = 0.3, 2.0
    for s in r.smoothed:
        assert s.mean[0] == pytest.approx(mean, abs=1e-12) and s.cov[0, 0] == pytest.approx(var, abs=1e-12)
        mean, var = 0.9 * mean + 0.1, 0.81 * var + 0.5


def test_rts_lengths():
    m = random_linear_model(np.random.default_rng(0), 2, 1)
    r = kalman_rts(m, simulate(m, 6, seed=0).observations)
    assert len(r.filtered) == 7 and len(r.smoothed) == 7 and len(r.predicted) == 6


def test_rts_rejects_nonlinear_model():
    with pytest.raises(DomainError):
        kalman_rts(stochastic_volatility_model(), [[0.1]])


@pytest.mark.parametrize("seed", range(5))
def test_rts_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    m = random_linear_model(rng, 3, 2)
    Y = simulate(m, 8, seed=seed).observations
    M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    Mi = np.linalg.inv(M)
    # z = M x
    mz = LinearGaussianModel(
        M @ m.A @ Mi, M @ m.b, M @ m.Q @ M.T, m.H @ Mi, m.e, m.R, M @ m.mu0, M @ m.Lambda0 @ M.T
    )
    a, b = kalman_rts(m, Y), kalman_rts(mz, Y)
    for sx, sz in zip(a.smoothed, b.smoothed):
        assert np.allclose(Mi @ sz.mean, sx.mean, atol=1e-10)
        assert np.allclose(Mi @ sz.cov @ Mi.T, sx.cov, atol=1e-10)
    # the data likelihood does not depend on the state coordinates
    assert a.log_likelihood == pytest.approx(b.log_likelihood, abs=1e-9)


def test_grid_matches_rts_on_random_walk():
    m = random_walk_model()
    Y = simulate(m, 3, seed=11).observations
    g = grid_smoother_1d(m, Y, (-10, 10, 4001))
    r = kalman_rts(m, Y)
    for (mean, var), s in zip(g, r.smoothed):
        assert mean == pytest.approx(s.mean[0], abs=1e-4) and var == pytest.approx(s.cov[0, 0], abs=1e-4)


def test_grid_refinement_converges():
    m = random_walk_model()
    Y = simulate(m, 3, seed=0).observations
    r = kalman_rts(m, Y)

    def err(n):
        g = grid_smoother_1d(m, Y, (-10, 10, n))
        return max(max(abs(a - s.mean[0]), abs(b - s.cov[0, 0])) for (a, b), s in zip(g, r.smoothed))

    errs = [err(n) for n in (11, 21, 41)]
    # the trapezoid rule is spectrally accurate here, so stop once at roundoff
    for coarse, fine in zip(errs, errs[1:]):
        if coarse > 1e-12:
            assert fine <= coarse / 2
    assert errs[0] > 1e-6


def test_grid_no_data_gives_prior():
    sv = stochastic_volatility_model()
    (mean, var), = grid_smoother_1d(sv, np.zeros((0, 1)))
    assert mean == pytest.approx(0.0, abs=1e-12) and var == pytest.approx(sv.stationary_var, abs=1e-10)


def test_grid_sv_self_convergence():
    sv = stochastic_volatility_model()
    Y = simulate(sv, 5, seed=2).observations
    a = grid_smoother_1d(sv, Y, (-10, 10, 2001))
    b = grid_smoother_1d(sv, Y, (-10, 10, 8001))
    assert np.max(np.abs(np.array(a) - np.array(b))) <= 1e-4


def test_grid_too_small():
    with pytest.raises(GridTooSmallError):
        grid_smoother_1d(random_walk_model(), [[0.0]], (-1, 1, 201))


def test_grid_rejects_bad_input():
    with pytest.raises(DomainError):
        grid_smoother_1d(random_linear_model(np.random.default_rng(0), 2, 1), [[0.0]])
    with pytest.raises(DomainError):
        grid_smoother_1d(random_walk_model(), [[0.0]], (1, -1, 100))
