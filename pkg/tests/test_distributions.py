import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from latentps.distributions import (
    DomainError,
    RngStream,
    burr_link,
    probit_inv,
    sample_dirichlet,
    sample_inverse_wishart,
    sample_mvn,
    sample_skewed_mvt,
    sample_truncated_inverse_gamma,
    sample_truncated_normal,
)
from oracles import chi2_gof_pvalue

N_GOF = 100_000


def rng(seed=0):
    return np.random.default_rng(seed)


# --- RngStream ---------------------------------------------------------------


def test_rng_stream_replays_identically():
    a = RngStream(123, 4).generator().standard_normal(50)
    b = RngStream(123, 4).generator().standard_normal(50)
    assert np.array_equal(a, b)


def test_rng_streams_with_distinct_ids_are_uncorrelated():
    a = RngStream(123, 0).generator().standard_normal(100_000)
    b = RngStream(123, 1).generator().standard_normal(100_000)
    assert not np.array_equal(a[:10], b[:10])
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.015


def test_rng_stream_rejects_bad_keys():
    with pytest.raises(DomainError):
        RngStream(-1)
    with pytest.raises(DomainError):
        RngStream(1, -2)


# --- links -------------------------------------------------------------------


def test_probit_inv_reference_values():
    assert probit_inv(0.0) == 0.5
    quad = integrate.quad(stats.norm.pdf, -np.inf, 1.959964)[0]
    assert probit_inv(1.959964) == pytest.approx(quad, abs=1e-9)
    assert probit_inv(1.959964) == pytest.approx(0.975, abs=1e-8)


def test_probit_inv_deep_left_tail_does_not_underflow():
    v = probit_inv(-38.0)
    assert 0.0 < v <= 1e-300
    assert v == pytest.approx(float(mpmath.ncdf(-38)), rel=1e-6)
    xs = np.linspace(-37.0, 37.0, 2001)
    assert np.all(probit_inv(xs) > 0.0)
    for x in (-37.0, -20.0, -5.0, 0.3, 6.0):
        assert probit_inv(x) == pytest.approx(float(mpmath.ncdf(x)), rel=1e-12, abs=1e-16)


def test_probit_inv_rejects_non_finite():
    with pytest.raises(DomainError):
        probit_inv(np.nan)
    with pytest.raises(DomainError):
        probit_inv(np.array([0.0, np.inf]))


def test_links_are_strictly_monotone_on_grid():
    # Above ~5 the normal CDF is within a few ulps of 1 and stops resolving.
    assert np.all(np.diff(probit_inv(np.linspace(-37.0, 5.0, 1000))) > 0)
    assert np.all(np.diff(burr_link(np.linspace(-8.0, 8.0, 1000), 0.5)) > 0)


def test_burr_link_values():
    assert burr_link(0.0, 0.5) == pytest.approx(1 - 2**-0.5, abs=1e-15)
    assert burr_link(-800.0, 0.5) < 1e-300
    exact = float(1 - (1 + mpmath.e**2) ** mpmath.mpf(-0.5))
    assert burr_link(2.0, 0.5) == pytest.approx(exact, abs=1e-14)
    assert 0.0 < burr_link(-30.0, 2.0) < burr_link(30.0, 2.0) <= 1.0


def test_burr_link_rejects_non_positive_c():
    with pytest.raises(DomainError):
        burr_link(0.0, 0.0)
    with pytest.raises(DomainError):
        burr_link(0.0, -1.0)


# --- truncated normal ----------------------------------------------------------


def test_truncated_normal_untruncated_mean():
    x = sample_truncated_normal(0.0, 1.0, -np.inf, np.inf, rng(1), size=10**6)
    assert abs(x.mean()) < 0.004


def test_truncated_normal_half_normal_mean():
    x = sample_truncated_normal(0.0, 1.0, 0.0, np.inf, rng(2), size=10**6)
    assert np.all(x > 0)
    assert abs(x.mean() - np.sqrt(2 / np.pi)) < 0.002


def test_truncated_normal_far_upper_truncation_moment():
    x = sample_truncated_normal(5.0, 1.0, -np.inf, 0.0, rng(3), size=10**6)
    assert np.all(x < 0)
    beta = -5.0
    lam = stats.norm.pdf(beta) / stats.norm.cdf(beta)
    mean = 5.0 - lam
    var = 1.0 - beta * lam - lam**2
    assert abs(x.mean() - mean) < 3 * np.sqrt(var / x.size)


@pytest.mark.parametrize(
    "mean, sd, lower, upper",
    [
        (0.0, 1.0, 0.0, np.inf),
        (0.0, 1.0, -np.inf, 0.0),
        (1.0, 2.0, -1.0, 0.5),
        (0.0, 1.0, 1.0, 3.0),
        (0.0, 1.0, 6.0, np.inf),
        (0.0, 1.0, -np.inf, -7.5),
        (0.0, 1.0, 5.0, 5.15),
        (2.0, 0.5, 5.0, 9.0),
    ],
)
def test_truncated_normal_goodness_of_fit(mean, sd, lower, upper):
    x = sample_truncated_normal(mean, sd, lower, upper, rng(11), size=N_GOF)
    assert np.all((x > lower) & (x < upper))
    target = stats.truncnorm((lower - mean) / sd, (upper - mean) / sd, loc=mean, scale=sd)
    assert chi2_gof_pvalue(x, target.cdf, ppf=target.ppf) > 0.001


def test_truncated_normal_broadcasts_over_arrays():
    lower = np.array([0.0, -np.inf, 4.5, -1.0])
    upper = np.array([np.inf, 0.0, np.inf, 1.0])
    x = sample_truncated_normal(np.zeros(4), 1.0, lower, upper, rng(4))
    assert x.shape == (4,)
    assert np.all((x > lower) & (x < upper))


def test_truncated_normal_rejects_empty_interval():
    with pytest.raises(DomainError):
        sample_truncated_normal(0.0, 1.0, 1.0, 1.0, rng())
    with pytest.raises(DomainError):
        sample_truncated_normal(0.0, 1.0, 2.0, 1.0, rng())
    with pytest.raises(DomainError):
        sample_truncated_normal(0.0, 0.0, 0.0, 1.0, rng())


@settings(max_examples=200, deadline=None)
@given(
    mean=st.floats(-50, 50),
    sd=st.floats(0.01, 20),
    lo=st.floats(-60, 60),
    width=st.floats(1e-3, 50),
    seed=st.integers(0, 2**32 - 1),
)
def test_truncated_normal_draws_stay_strictly_inside(mean, sd, lo, width, seed):
    x = sample_truncated_normal(mean, sd, lo, lo + width, rng(seed), size=20)
    assert np.all((x > lo) & (x < lo + width))


def test_truncated_normal_is_reproducible():
    a = sample_truncated_normal(0.0, 1.0, 0.5, np.inf, RngStream(9).generator(), size=100)
    b = sample_truncated_normal(0.0, 1.0, 0.5, np.inf, RngStream(9).generator(), size=100)
    assert np.array_equal(a, b)


# --- truncated inverse gamma ------------------------------------------------------


def test_truncated_inverse_gamma_untruncated_mean():
    x = sample_truncated_inverse_gamma(2.0, 1.0, 1e12, rng(5), size=10**6)
    assert abs(x.mean() - 1.0) < 0.01


def test_truncated_inverse_gamma_support():
    x = sample_truncated_inverse_gamma(2.0, 1.0, 0.5, rng(6), size=10**5)
    assert np.all((x > 0) & (x < 0.5))


def _ig_truncated_cdf_by_quadrature(shape, rate, upper):
    pdf = lambda t: stats.invgamma.pdf(t, shape, scale=rate)
    total = integrate.quad(pdf, 0, upper, limit=200)[0]
    return lambda x: integrate.quad(pdf, 0, min(x, upper), limit=200)[0] / total


def test_truncated_inverse_gamma_cdf_matches_quadrature():
    x = sample_truncated_inverse_gamma(1.5, 0.8, 2.0, rng(7), size=10**5)
    cdf = _ig_truncated_cdf_by_quadrature(1.5, 0.8, 2.0)
    assert abs(np.mean(x <= 1.0) - cdf(1.0)) < 0.01


@pytest.mark.parametrize(
    "shape, rate, upper",
    [(1.5, 0.8, 2.0), (30.0, 7.5, 25.0), (0.5, 3.0, 1.0), (5.0, 200.0, 10.0)],
)
def test_truncated_inverse_gamma_goodness_of_fit(shape, rate, upper):
    x = sample_truncated_inverse_gamma(shape, rate, upper, rng(8), size=N_GOF)
    assert np.all((x > 0) & (x < upper))
    cdf = _ig_truncated_cdf_by_quadrature(shape, rate, upper)
    assert chi2_gof_pvalue(x, cdf, n_bins=30, bracket=(1e-12, upper)) > 0.001


def test_truncated_inverse_gamma_tiny_rate_stays_positive():
    x = sample_truncated_inverse_gamma(30.0, 1e-12, 25.0, rng(9), size=1000)
    assert np.all(x > 0) and np.all(x < 25.0)


def test_truncated_inverse_gamma_rejects_non_positive():
    for args in [(0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0), (-1.0, 1.0, 1.0)]:
        with pytest.raises(DomainError):
            sample_truncated_inverse_gamma(*args, rng())


# --- inverse Wishart ----------------------------------------------------------------


def _iw_draws(scale, dof, n, seed):
    g = rng(seed)
    return np.array([sample_inverse_wishart(scale, dof, g) for _ in range(n)])


def test_inverse_wishart_mean_identity():
    draws = _iw_draws(np.eye(2), 5.0, 10**5, 10)
    assert np.allclose(draws.mean(axis=0), np.eye(2) / 2, atol=0.02)


def test_inverse_wishart_mean_diagonal():
    scale = np.diag([4.0, 1.0])
    draws = _iw_draws(scale, 10.0, 10**5, 11)
    assert np.allclose(draws.mean(axis=0), scale / 7, atol=0.02)


def test_inverse_wishart_marginal_goodness_of_fit():
    scale = np.array([[2.0, 0.6], [0.6, 1.0]])
    dof, p = 7.0, 2
    draws = _iw_draws(scale, dof, N_GOF, 12)
    for i in range(p):
        # Diagonal entries of an inverse Wishart are inverse gamma.
        target = stats.invgamma((dof - p + 1) / 2, scale=scale[i, i] / 2)
        assert chi2_gof_pvalue(draws[:, i, i], target.cdf, ppf=target.ppf) > 0.001


def test_inverse_wishart_outputs_symmetric_positive_definite():
    g = rng(13)
    scale = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 0.5]])
    for _ in range(500):
        s = sample_inverse_wishart(scale, 3.5, g)
        assert np.array_equal(s, s.T)
        assert np.all(np.linalg.eigvalsh(s) > 0)


def test_inverse_wishart_rejects_bad_inputs():
    with pytest.raises(DomainError):
        sample_inverse_wishart(np.array([[1.0, 2.0], [2.0, 1.0]]), 5.0, rng())
    with pytest.raises(DomainError):
        sample_inverse_wishart(np.eye(3), 1.5, rng())


# --- Dirichlet --------------------------------------------------------------------


def test_dirichlet_means():
    g = rng(14)
    d = np.array([sample_dirichlet([1.0, 1.0], g) for _ in range(10**5)])
    assert np.allclose(d.mean(axis=0), [0.5, 0.5], atol=0.005)
    d = np.array([sample_dirichlet([6.0, 5.0], g) for _ in range(10**5)])
    assert np.allclose(d.mean(axis=0), [6 / 11, 5 / 11], atol=0.005)
    assert np.all(np.abs(d.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(d >= 0)


def test_dirichlet_marginal_goodness_of_fit():
    g = rng(15)
    conc = np.array([2.0, 0.7, 3.3])
    d = np.array([sample_dirichlet(conc, g) for _ in range(N_GOF)])
    target = stats.beta(conc[1], conc.sum() - conc[1])
    assert chi2_gof_pvalue(d[:, 1], target.cdf, ppf=target.ppf) > 0.001


def test_dirichlet_rejects_non_positive():
    with pytest.raises(DomainError):
        sample_dirichlet([1.0, 0.0], rng())


# --- MVN ------------------------------------------------------------------------


def test_mvn_moments():
    x = sample_mvn(np.zeros(3), np.eye(3), rng(16), size=10**5)
    assert np.all(np.abs(x.mean(axis=0)) < 0.01)
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    x = sample_mvn(np.array([-2.0, -2.0]), cov, rng(17), size=10**5)
    assert abs(np.corrcoef(x.T)[0, 1] - 0.5) < 0.01


def test_mvn_one_dimensional_equals_univariate():
    a = np.array([sample_mvn([1.5], [[4.0]], RngStream(3).generator())[0]])
    g = RngStream(3).generator()
    b = 1.5 + 2.0 * g.standard_normal(1)
    assert np.array_equal(a, b)


def test_mvn_projection_goodness_of_fit():
    cov = np.array([[2.0, -0.4, 0.3], [-0.4, 1.0, 0.2], [0.3, 0.2, 0.7]])
    x = sample_mvn(np.array([1.0, 0.0, -1.0]), cov, rng(18), size=N_GOF)
    a = np.array([0.3, -1.0, 0.5])
    target = stats.norm(a @ [1.0, 0.0, -1.0], np.sqrt(a @ cov @ a))
    assert chi2_gof_pvalue(x @ a, target.cdf, ppf=target.ppf) > 0.001


def test_mvn_rejects_non_spd():
    with pytest.raises(DomainError):
        sample_mvn(np.zeros(2), np.array([[1.0, 1.5], [1.5, 1.0]]), rng())


# --- skewed multivariate t ---------------------------------------------------------


def test_skewed_mvt_normal_limit():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    x = sample_skewed_mvt(np.zeros(2), cov, 1e6, 0.0, rng(19), size=10**5)
    for i in range(2):
        d = stats.kstest(x[:, i], stats.norm(0, np.sqrt(cov[i, i])).cdf).statistic
        assert d < 0.01


def test_skewed_mvt_positive_skewness():
    cov = np.array([[1.0, -0.5], [-0.5, 1.5]])
    x = sample_skewed_mvt(np.array([-2.0, -2.0]), cov, 5.0, 2.0, rng(20), size=10**5)
    assert np.all(stats.skew(x, axis=0) > 0)


def test_skewed_mvt_location_equivariance():
    cov = np.eye(2)
    a = sample_skewed_mvt(np.zeros(2), cov, 5.0, 2.0, RngStream(4).generator(), size=1000)
    b = sample_skewed_mvt(np.array([3.0, -1.0]), cov, 5.0, 2.0, RngStream(4).generator(), size=1000)
    assert np.allclose(b - a, [3.0, -1.0], atol=1e-12)
    assert np.allclose(b.mean(axis=0) - a.mean(axis=0), [3.0, -1.0], atol=1e-12)


def test_skewed_mvt_unskewed_goodness_of_fit():
    scale = np.array([[1.5, 0.2], [0.2, 0.8]])
    x = sample_skewed_mvt(np.array([1.0, 2.0]), scale, 5.0, 0.0, rng(21), size=N_GOF)
    target = stats.t(5.0, loc=1.0, scale=np.sqrt(1.5))
    assert chi2_gof_pvalue(x[:, 0], target.cdf, ppf=target.ppf) > 0.001


def test_skewed_mvt_rejects_bad_inputs():
    with pytest.raises(DomainError):
        sample_skewed_mvt(np.zeros(2), np.eye(2), 0.0, 1.0, rng())
    with pytest.raises(DomainError):
        sample_skewed_mvt(np.zeros(2), -np.eye(2), 5.0, 1.0, rng())
