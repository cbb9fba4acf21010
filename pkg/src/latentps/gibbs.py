"""Data-augmented Gibbs sampler.

One sweep updates, in order: strata means, the common covariance, strata
weights, compliance regression (with probit augmentation), the compliance
random-effect variance and cluster effects, the outcome regression, outcome
variances, the outcome random-effect variance and cluster effects, then the
latent strata, control-arm compliance metrics, control-arm individual
compliance and finally incidentally missing treated-arm values.

Each block has a ``*_conditional`` function returning the parameters of its
full conditional and an ``update_*`` function drawing from it.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, log_ndtr, ndtr

from .data_model import LatentState, MissingReason, TrialDataset
from .distributions import (
    DomainError,
    RngStream,
    sample_dirichlet,
    sample_inverse_wishart,
    sample_mvn,
    sample_truncated_inverse_gamma,
    sample_truncated_normal,
)
from .model import ConfigError, ModelConfig, ParameterState, PriorSpec, compliance_linpred, outcome_linpred

__all__ = [
    "SamplerError",
    "ChainConfig",
    "PosteriorDraws",
    "STRATA_FIELDS",
    "strata_means_conditional",
    "update_strata_means",
    "sigma_conditional",
    "update_sigma",
    "pi_conditional",
    "update_pi",
    "compliance_coefficients_conditional",
    "update_compliance_coefficients",
    "tau_conditional",
    "update_tau_D",
    "phi_D_conditional",
    "update_phi_D",
    "outcome_coefficients_conditional",
    "update_outcome_coefficients",
    "sigma_sq_conditional",
    "update_sigma_k_sq",
    "update_tau_Y",
    "phi_Y_conditional",
    "update_phi_Y",
    "strata_log_weights",
    "update_S",
    "C_mis_conditional",
    "update_C_mis",
    "D_mis_probability",
    "update_D_mis",
    "incidental_D_probability",
    "impute_incidental_missing",
    "initialize",
    "gibbs_sweep",
    "run_chain",
    "write_draws",
    "read_draws",
]

log = logging.getLogger(__name__)

# Lower guard on the inverse-gamma rate of the random-effect variances.
RATE_FLOOR = 1e-12

# ParameterState fields with a leading strata axis.
STRATA_FIELDS = ("pi", "mu_s", "mu_d", "alpha", "mu_y", "beta0", "beta1", "delta1", "delta0", "sigma_sq")


class SamplerError(RuntimeError):
    """Numerical failure inside the sampler."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class ChainConfig:
    """Run length and bookkeeping for one chain.

    Iterations ``m = 1..n_iterations`` are retained when ``m > burn_in`` and
    ``(m - burn_in) % thin == 0``. ``relabel`` orders strata after sampling by
    the stratum mean of column ``relabel_key`` of ``[C, Z]``.
    """

    n_iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    init: str = "kmeans"
    seed: int = 0
    chain_id: int = 0
    relabel: str = "descending"
    relabel_key: int = 0

    def __post_init__(self):
        if self.n_iterations < 0 or self.burn_in < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.n_iterations > 0 and not self.burn_in < self.n_iterations:
            raise ConfigError("burn_in must be smaller than n_iterations")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if self.init not in ("kmeans", "random"):
            raise ConfigError("init must be 'kmeans' or 'random'")
        if self.relabel not in ("descending", "ascending", "none"):
            raise ConfigError("relabel must be 'descending', 'ascending' or 'none'")

    @property
    def n_retained(self) -> int:
        return max(self.n_iterations - self.burn_in, 0) // self.thin


# -- small linear-algebra helpers ---------------------------------------------------


def _cholesky(matrix, what):
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise SamplerError(f"{what} is not positive definite") from exc


def _draw_from_precision(mean, chol_precision, rng):
    """``mean + L^{-T} z`` is a draw from ``N(mean, (L L^T)^{-1})``."""
    z = rng.standard_normal(mean.shape[0])
    return mean + solve_triangular(chol_precision.T, z, lower=False)


def _stratified_design(blocks, strata, K):
    """Stack regression blocks, expanding per-stratum blocks into K masked copies.

    ``blocks`` is a list of ``(columns (N, b), shared)``. The coefficient layout
    is block by block, each per-stratum block ordered stratum-major.
    """
    n = strata.shape[0]
    onehot = (strata[:, None] == np.arange(K)).astype(float)
    cols, layout = [], []
    for block, shared in blocks:
        b = block.shape[1]
        if shared:
            cols.append(block)
        else:
            cols.append((onehot[:, :, None] * block[:, None, :]).reshape(n, K * b))
        layout.append((b, shared))
    return np.hstack(cols), layout


def _unpack(vec, layout, K):
    out, pos = [], 0
    for b, shared in layout:
        if shared:
            out.append(np.tile(vec[pos : pos + b], (K, 1)))
            pos += b
        else:
            out.append(vec[pos : pos + K * b].reshape(K, b))
            pos += K * b
    return out


def _prior_precision(layout, K, variances):
    return np.concatenate([np.full(b if shared else K * b, 1.0 / var) for (b, shared), var in zip(layout, variances)])


def _regression_conditional(design, target, weights, prior_prec):
    """Mean and precision Cholesky factor of a zero-mean-prior Gaussian regression."""
    xw = design * weights[:, None]
    precision = design.T @ xw + np.diag(prior_prec)
    chol = _cholesky(precision, "regression precision")
    mean = cho_solve((chol, True), xw.T @ target)
    return mean, chol


def _cz(data, latent):
    return np.column_stack([latent.C, data.Z])


# -- (a) strata means ----------------------------------------------------------------


def strata_means_conditional(theta: ParameterState, data: TrialDataset, latent: LatentState, priors: PriorSpec):
    """Per-stratum conditional mean ``(K, q)`` and covariance ``(K, q, q)``."""
    cz = _cz(data, latent)
    K = theta.K
    v_inv = np.linalg.inv(priors.mu_s_cov)
    s_inv = np.linalg.inv(theta.sigma)
    counts = np.bincount(latent.S, minlength=K)
    sums = np.zeros((K, cz.shape[1]))
    np.add.at(sums, latent.S, cz)
    means = np.empty((K, cz.shape[1]))
    covs = np.empty((K, cz.shape[1], cz.shape[1]))
    for k in range(K):
        cov = np.linalg.inv(v_inv + counts[k] * s_inv)
        cov = 0.5 * (cov + cov.T)
        covs[k] = cov
        means[k] = cov @ (v_inv @ priors.mu_s_mean + s_inv @ sums[k])
    return means, covs


def update_strata_means(theta, data, latent, priors, rng):
    means, covs = strata_means_conditional(theta, data, latent, priors)
    try:
        return np.array([sample_mvn(means[k], covs[k], rng) for k in range(theta.K)])
    except DomainError as exc:
        raise SamplerError(str(exc)) from exc


# -- (b) common covariance -----------------------------------------------------------


def sigma_conditional(theta, data, latent, priors):
    """Inverse-Wishart scale ``Psi + sum of residual outer products`` and dof ``I + nu``."""
    resid = _cz(data, latent) - theta.mu_s[latent.S]
    return priors.iw_scale + resid.T @ resid, data.n_clusters + priors.iw_dof


def update_sigma(theta, data, latent, priors, rng):
    scale, dof = sigma_conditional(theta, data, latent, priors)
    try:
        return sample_inverse_wishart(0.5 * (scale + scale.T), dof, rng)
    except DomainError as exc:
        raise SamplerError(str(exc)) from exc


# -- (c) strata weights --------------------------------------------------------------


def pi_conditional(theta, latent, priors):
    return priors.dirichlet + np.bincount(latent.S, minlength=theta.K)


def update_pi(theta, latent, priors, rng):
    return sample_dirichlet(pi_conditional(theta, latent, priors), rng)


# -- (d) compliance regression -----------------------------------------------------------


def _compliance_design(data, strata_ind, config):
    ones = np.ones((data.n_individuals, 1))
    return _stratified_design([(ones, False), (data.X, config.shared_alpha)], strata_ind, config.K)


def draw_compliance_augmentation(theta, data, latent, rng):
    """Latent utilities: positive where ``D = 1``, negative where ``D = 0``."""
    cl = data.cluster_of
    eta = compliance_linpred(theta, data.X, latent.S[cl], theta.phi_d[cl])
    d1 = latent.D == 1
    lower = np.where(d1, 0.0, -np.inf)
    upper = np.where(d1, np.inf, 0.0)
    return np.asarray(sample_truncated_normal(eta, 1.0, lower, upper, rng), dtype=float).reshape(-1)


def compliance_coefficients_conditional(theta, data, latent, priors, config, U):
    """Conditional of ``(mu_d, alpha)`` given the augmentation ``U``.

    Returns ``(mean, chol_precision, layout)`` over the stacked coefficient
    vector ``[mu_d per stratum, alpha (per stratum or shared)]``.
    """
    cl = data.cluster_of
    design, layout = _compliance_design(data, latent.S[cl], config)
    prec = _prior_precision(layout, config.K, [priors.mu_d_var, priors.alpha_var])
    mean, chol = _regression_conditional(design, U - theta.phi_d[cl], np.ones(data.n_individuals), prec)
    return mean, chol, layout


def update_compliance_coefficients(theta, data, latent, priors, config, rng):
    """Return ``(mu_d (K,), alpha (K, M), U (N,))``."""
    U = draw_compliance_augmentation(theta, data, latent, rng)
    mean, chol, layout = compliance_coefficients_conditional(theta, data, latent, priors, config, U)
    mu_d, alpha = _unpack(_draw_from_precision(mean, chol, rng), layout, config.K)
    return mu_d[:, 0].copy(), alpha, U


# -- (e), (i) random-effect variances -------------------------------------------------------


def tau_conditional(phi, upper):
    """Truncated inverse-gamma ``(shape, rate, upper)`` for a random-effect variance.

    With a uniform prior on the standard deviation the prior density of the
    variance is proportional to ``tau_sq**-0.5``, which gives shape ``(I-1)/2``.
    """
    n = phi.shape[0]
    if n < 2:
        raise SamplerError("at least two clusters are needed to update a random-effect variance")
    return 0.5 * (n - 1), max(0.5 * float(phi @ phi), RATE_FLOOR), upper


def update_tau_D(theta, latent, priors, rng):
    return float(sample_truncated_inverse_gamma(*tau_conditional(theta.phi_d, priors.tau_d_upper), rng))


def update_tau_Y(theta, latent, priors, rng):
    return float(sample_truncated_inverse_gamma(*tau_conditional(theta.phi_y, priors.tau_y_upper), rng))


# -- (f) compliance cluster effects --------------------------------------------------------------


def phi_D_conditional(theta, data, latent, U):
    """Per-cluster normal mean and variance of the compliance cluster effects."""
    cl = data.cluster_of
    resid = U - compliance_linpred(theta, data.X, latent.S[cl])
    sums = np.bincount(cl, weights=resid, minlength=data.n_clusters)
    var = 1.0 / (data.cluster_sizes + 1.0 / theta.tau_d_sq)
    return var * sums, var


def update_phi_D(theta, data, latent, U, rng):
    mean, var = phi_D_conditional(theta, data, latent, U)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])


# -- (g) outcome regression ---------------------------------------------------------------


def _outcome_design(data, strata_ind, D, config):
    w = data.W[data.cluster_of].astype(float)[:, None]
    d = np.asarray(D, dtype=float)[:, None]
    ones = np.ones_like(w)
    blocks = [
        (ones, False),  # mu_y
        (data.X, config.shared_beta),  # beta0
        ((1 - w) * d, False),  # delta0
        (w * d * data.X, config.shared_beta),  # beta1
        (w * d, False),  # delta1
    ]
    return _stratified_design(blocks, strata_ind, config.K)


def _outcome_variance_ind(theta, strata_ind):
    return theta.sigma_sq[strata_ind]


def draw_outcome_augmentation(theta, data, latent, rng):
    """Binary family: latent utilities positive where ``Y = 1``."""
    cl = data.cluster_of
    w = data.W[cl].astype(float)
    eta = outcome_linpred(theta, data.X, latent.S[cl], w, latent.D, theta.phi_y[cl])
    y1 = latent.Y == 1
    lower = np.where(y1, 0.0, -np.inf)
    upper = np.where(y1, np.inf, 0.0)
    return np.asarray(sample_truncated_normal(eta, 1.0, lower, upper, rng), dtype=float).reshape(-1)


def outcome_coefficients_conditional(theta, data, latent, priors, config, target=None):
    """Conditional of ``(mu_y, beta0, delta0, beta1, delta1)``.

    ``target`` is the outcome (Gaussian) or its augmentation (binary); it
    defaults to the completed outcomes.
    """
    cl = data.cluster_of
    s_ind = latent.S[cl]
    design, layout = _outcome_design(data, s_ind, latent.D, config)
    y = latent.Y if target is None else target
    if config.binary:
        weights = np.ones(data.n_individuals)
    else:
        weights = 1.0 / _outcome_variance_ind(theta, s_ind)
    prec = _prior_precision(layout, config.K, [priors.mu_y_var, priors.beta_var, priors.delta0_var, priors.beta_var, priors.delta1_var])
    mean, chol = _regression_conditional(design, y - theta.phi_y[cl], weights, prec)
    return mean, chol, layout


def update_outcome_coefficients(theta, data, latent, priors, config, rng):
    """Return ``((mu_y, beta0, delta0, beta1, delta1), V)``; ``V`` is ``None`` for Gaussian outcomes."""
    V = draw_outcome_augmentation(theta, data, latent, rng) if config.binary else None
    mean, chol, layout = outcome_coefficients_conditional(theta, data, latent, priors, config, target=V)
    mu_y, beta0, delta0, beta1, delta1 = _unpack(_draw_from_precision(mean, chol, rng), layout, config.K)
    return (mu_y[:, 0].copy(), beta0, delta0[:, 0].copy(), beta1, delta1[:, 0].copy()), V


# -- (h) outcome variances ------------------------------------------------------------------------


def sigma_sq_conditional(theta, data, latent, priors, config):
    """Inverse-gamma ``(shape, rate)`` per stratum (length-1 arrays if shared)."""
    cl = data.cluster_of
    s_ind = latent.S[cl]
    w = data.W[cl].astype(float)
    resid = latent.Y - outcome_linpred(theta, data.X, s_ind, w, latent.D, theta.phi_y[cl])
    if config.shared_sigma:
        n = np.array([data.n_individuals])
        ssr = np.array([resid @ resid])
    else:
        n = np.bincount(s_ind, minlength=config.K)
        ssr = np.bincount(s_ind, weights=resid * resid, minlength=config.K)
    return priors.sigma_shape + 0.5 * n, priors.sigma_rate + 0.5 * ssr


def update_sigma_k_sq(theta, data, latent, priors, config, rng):
    if config.binary:
        return np.ones(config.K)
    shape, rate = sigma_sq_conditional(theta, data, latent, priors, config)
    draw = rate / rng.gamma(shape)
    return np.full(config.K, draw[0]) if config.shared_sigma else draw


# -- (j) outcome cluster effects -----------------------------------------------------------------


def phi_Y_conditional(theta, data, latent, config, target=None):
    cl = data.cluster_of
    s_ind = latent.S[cl]
    w = data.W[cl].astype(float)
    y = latent.Y if target is None else target
    resid = y - outcome_linpred(theta, data.X, s_ind, w, latent.D)
    sums = np.bincount(cl, weights=resid, minlength=data.n_clusters)
    sig = np.ones(data.n_clusters) if config.binary else theta.sigma_sq[latent.S]
    n = data.cluster_sizes
    tau = theta.tau_y_sq
    var = sig * tau / (n * tau + sig)
    mean = sums / (sig / tau + n)
    return mean, var


def update_phi_Y(theta, data, latent, config, rng, target=None):
    mean, var = phi_Y_conditional(theta, data, latent, config, target)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])


# -- latent strata ---------------------------------------------------------------------------------


def _mvn_logpdf_rows(x, mean, chol):
    z = solve_triangular(chol, (x - mean).T, lower=True)
    half_logdet = np.log(np.diag(chol)).sum()
    return -0.5 * (z * z).sum(axis=0) - half_logdet - 0.5 * x.shape[1] * np.log(2 * np.pi)


def _outcome_loglik(y, eta, var, binary):
    if binary:
        return np.where(y == 1, log_ndtr(eta), log_ndtr(-eta))
    r = y - eta
    return -0.5 * (np.log(2 * np.pi * var) + r * r / var)


def strata_log_weights(theta, data, latent, config):
    """Unnormalized log allocation weights ``(I, K)``."""
    K = config.K
    cl = data.cluster_of
    w = data.W[cl].astype(float)
    cz = _cz(data, latent)
    chol = _cholesky(theta.sigma, "Sigma")
    D = latent.D
    out = np.empty((data.n_clusters, K))
    with np.errstate(divide="ignore"):
        log_pi = np.log(theta.pi)
    for k in range(K):
        kk = np.full(data.n_individuals, k)
        eta_d = compliance_linpred(theta, data.X, kk, theta.phi_d[cl])
        comp = np.where(D == 1, log_ndtr(eta_d), log_ndtr(-eta_d))
        eta_y = outcome_linpred(theta, data.X, kk, w, D, theta.phi_y[cl])
        outc = _outcome_loglik(latent.Y, eta_y, theta.sigma_sq[k], config.binary)
        ind = np.bincount(cl, weights=comp + outc, minlength=data.n_clusters)
        out[:, k] = log_pi[k] + _mvn_logpdf_rows(cz, theta.mu_s[k], chol) + ind
    return out


def update_S(theta, data, latent, config, rng):
    if config.K == 1:
        return np.zeros(data.n_clusters, dtype=np.intp)
    logw = strata_log_weights(theta, data, latent, config)
    if np.any(np.all(~np.isfinite(logw) | np.isnan(logw), axis=1)) or np.any(np.isnan(logw)):
        raise SamplerError("strata allocation weights are all zero or undefined")
    # Gumbel-max: argmax(logw + G) is a categorical draw with weights exp(logw).
    return np.argmax(logw + rng.gumbel(size=logw.shape), axis=1).astype(np.intp)


# -- control-arm compliance metrics --------------------------------------------------------------


def C_mis_conditional(theta, data, latent):
    """Conditional means ``(n_control, l)`` and the shared covariance ``(l, l)``."""
    ell = data.n_compliance_metrics
    ctrl = data.W == 0
    s = latent.S[ctrl]
    mu_c = theta.mu_s[s, :ell]
    sig = theta.sigma
    s_cc = sig[:ell, :ell]
    if data.n_cluster_covariates == 0:
        return mu_c, s_cc
    s_cz = sig[:ell, ell:]
    s_zz = sig[ell:, ell:]
    gain = np.linalg.solve(s_zz, s_cz.T).T  # Sigma_CZ Sigma_ZZ^{-1}
    mean = mu_c + (data.Z[ctrl] - theta.mu_s[s, ell:]) @ gain.T
    cov = s_cc - gain @ s_cz.T
    return mean, 0.5 * (cov + cov.T)


def update_C_mis(theta, data, latent, rng):
    """Return the completed ``C`` with control rows redrawn."""
    C = latent.C.copy()
    ctrl = data.W == 0
    if not ctrl.any():
        return C
    mean, cov = C_mis_conditional(theta, data, latent)
    chol = _cholesky(cov, "conditional covariance of C")
    C[ctrl] = mean + rng.standard_normal(mean.shape) @ chol.T
    return C


# -- individual compliance ---------------------------------------------------------------------------


def _d_posterior_prob(theta, data, latent, config, rows, arm):
    """``P(D = 1 | Y, rest)`` for individuals ``rows`` evaluated in arm ``arm``."""
    cl = data.cluster_of[rows]
    s = latent.S[cl]
    X = data.X[rows]
    eta_d = compliance_linpred(theta, X, s, theta.phi_d[cl])
    y = latent.Y[rows]
    var = theta.sigma_sq[s]
    ll1 = log_ndtr(eta_d) + _outcome_loglik(y, outcome_linpred(theta, X, s, arm, 1.0, theta.phi_y[cl]), var, config.binary)
    ll0 = log_ndtr(-eta_d) + _outcome_loglik(y, outcome_linpred(theta, X, s, arm, 0.0, theta.phi_y[cl]), var, config.binary)
    return expit(ll1 - ll0)


def D_mis_probability(theta, data, latent, config):
    rows = data.d_status == MissingReason.STRUCTURAL
    return _d_posterior_prob(theta, data, latent, config, rows, 0.0)


def update_D_mis(theta, data, latent, config, rng):
    """Return the completed ``D`` with control-arm entries redrawn."""
    D = latent.D.copy()
    rows = data.d_status == MissingReason.STRUCTURAL
    if rows.any():
        p = D_mis_probability(theta, data, latent, config)
        D[rows] = (rng.random(p.shape[0]) < p).astype(D.dtype)
    return D


def incidental_D_probability(theta, data, latent, config):
    """``P(D = 1 | Y, rest)`` for treated individuals with missing ``D`` but observed ``Y``."""
    rows = (data.d_status == MissingReason.INCIDENTAL) & data.y_observed
    return _d_posterior_prob(theta, data, latent, config, rows, 1.0)


def impute_incidental_missing(theta, data, latent, config, rng):
    """Redraw incidentally missing ``D`` and ``Y``; returns completed ``(D, Y)``.

    Missing ``D`` with observed ``Y`` is drawn from its two-point conditional.
    Missing ``Y`` is drawn from the outcome model at the current ``D``; when
    both are missing they are drawn jointly, ``D`` first from the compliance
    model.
    """
    D = latent.D.copy()
    Y = latent.Y.copy()
    d_inc = data.d_status == MissingReason.INCIDENTAL
    y_inc = ~data.y_observed
    if not (d_inc.any() or y_inc.any()):
        return D, Y
    cl = data.cluster_of
    s_ind = latent.S[cl]

    only_d = d_inc & data.y_observed
    if only_d.any():
        p = incidental_D_probability(theta, data, latent, config)
        D[only_d] = (rng.random(p.shape[0]) < p).astype(D.dtype)

    both = d_inc & y_inc
    if both.any():
        eta = compliance_linpred(theta, data.X[both], s_ind[both], theta.phi_d[cl[both]])
        D[both] = (rng.random(eta.shape[0]) < ndtr(eta)).astype(D.dtype)

    if y_inc.any():
        w = data.W[cl[y_inc]].astype(float)
        eta = outcome_linpred(theta, data.X[y_inc], s_ind[y_inc], w, D[y_inc], theta.phi_y[cl[y_inc]])
        if config.binary:
            Y[y_inc] = (rng.random(eta.shape[0]) < ndtr(eta)).astype(float)
        else:
            Y[y_inc] = eta + np.sqrt(theta.sigma_sq[s_ind[y_inc]]) * rng.standard_normal(eta.shape[0])
    return D, Y


# -- initialization ----------------------------------------------------------------------------------


def initialize(data: TrialDataset, config: ModelConfig, priors: PriorSpec, rng, mode="kmeans"):
    """Starting values for one chain.

    Control-arm ``C`` starts at a least-squares prediction from ``Z`` fitted on
    the treated arm, strata from k-means on ``[C, Z]`` (or uniformly at random),
    regression coefficients at zero, cluster effects as draws from their
    random-effect distribution, and missing ``D``/``Y`` at draws from their
    observed marginals.
    """
    K = config.K
    ell = data.n_compliance_metrics
    treated = data.W == 1
    C = data.C.copy()
    if (~treated).any():
        if treated.sum() > data.n_cluster_covariates + 1:
            A = np.column_stack([np.ones(treated.sum()), data.Z[treated]])
            coef = np.linalg.lstsq(A, C[treated], rcond=None)[0]
            C[~treated] = np.column_stack([np.ones((~treated).sum()), data.Z[~treated]]) @ coef
        elif treated.any():
            C[~treated] = C[treated].mean(axis=0)
        else:
            C[~treated] = 0.0
    cz = np.column_stack([C, data.Z])

    if K == 1:
        S = np.zeros(data.n_clusters, dtype=np.intp)
    elif mode == "kmeans" and data.n_clusters >= K:
        scale = cz.std(axis=0)
        scale[scale == 0] = 1.0
        _, S = kmeans2(cz / scale, K, minit="++", rng=rng)
        S = S.astype(np.intp)
    else:
        S = rng.integers(0, K, data.n_clusters).astype(np.intp)

    D = np.where(np.isnan(data.D), 0.0, data.D)
    d_obs = data.d_observed
    rate = data.D[d_obs].mean() if d_obs.any() else 0.5
    rate = float(np.clip(rate, 0.05, 0.95))
    missing_d = ~d_obs
    D[missing_d] = (rng.random(missing_d.sum()) < rate).astype(float)

    Y = data.Y.copy()
    y_obs = data.y_observed
    y_vals = data.Y[y_obs]
    if (~y_obs).any():
        if config.binary:
            p = float(np.clip(y_vals.mean() if y_vals.size else 0.5, 0.05, 0.95))
            Y[~y_obs] = (rng.random((~y_obs).sum()) < p).astype(float)
        else:
            centre = y_vals.mean() if y_vals.size else 0.0
            spread = y_vals.std() if y_vals.size > 1 else 1.0
            Y[~y_obs] = centre + spread * rng.standard_normal((~y_obs).sum())

    latent = LatentState(S=S, C=C, D=D, Y=Y)

    q = cz.shape[1]
    M = data.n_individual_covariates
    counts = np.bincount(S, minlength=K)
    mu_s = np.array([cz[S == k].mean(axis=0) if counts[k] else priors.mu_s_mean for k in range(K)])
    resid = cz - mu_s[S]
    sigma = (resid.T @ resid + priors.iw_scale) / max(data.n_clusters, 1) + 1e-6 * np.eye(q)
    pi = (counts + priors.dirichlet) / (counts + priors.dirichlet).sum()

    if config.binary:
        sigma_sq = np.ones(K)
    elif priors.sigma_shape > 1:
        sigma_sq = np.full(K, priors.sigma_rate / (priors.sigma_shape - 1))
    else:
        sigma_sq = np.full(K, y_vals.var() if y_vals.size > 1 else 1.0)
    # Uniform-on-sd prior mean of the variance is upper/3; capped so that the
    # first sweep does not start from extreme cluster effects.
    tau_d_sq = min(priors.tau_d_upper / 3.0, 1.0)
    tau_y_sq = min(priors.tau_y_upper / 3.0, 1.0)
    theta = ParameterState(
        pi=pi,
        mu_s=mu_s,
        sigma=sigma,
        mu_d=np.zeros(K),
        alpha=np.zeros((K, M)),
        tau_d_sq=tau_d_sq,
        phi_d=np.sqrt(tau_d_sq) * rng.standard_normal(data.n_clusters),
        mu_y=np.zeros(K),
        beta0=np.zeros((K, M)),
        beta1=np.zeros((K, M)),
        delta1=np.zeros(K),
        delta0=np.zeros(K),
        sigma_sq=sigma_sq,
        tau_y_sq=tau_y_sq,
        phi_y=np.sqrt(tau_y_sq) * rng.standard_normal(data.n_clusters),
    )
    return theta, latent


# -- sweep and chain ---------------------------------------------------------------------------------


def gibbs_sweep(theta: ParameterState, latent: LatentState, data: TrialDataset, priors: PriorSpec, config: ModelConfig, rng):
    """One full sweep, updating ``theta`` and ``latent`` in place."""
    theta.mu_s = update_strata_means(theta, data, latent, priors, rng)
    theta.sigma = update_sigma(theta, data, latent, priors, rng)
    theta.pi = update_pi(theta, latent, priors, rng)
    theta.mu_d, theta.alpha, latent.U = update_compliance_coefficients(theta, data, latent, priors, config, rng)
    theta.tau_d_sq = update_tau_D(theta, latent, priors, rng)
    theta.phi_d = update_phi_D(theta, data, latent, latent.U, rng)
    (theta.mu_y, theta.beta0, theta.delta0, theta.beta1, theta.delta1), latent.V = update_outcome_coefficients(
        theta, data, latent, priors, config, rng
    )
    theta.sigma_sq = update_sigma_k_sq(theta, data, latent, priors, config, rng)
    theta.tau_y_sq = update_tau_Y(theta, latent, priors, rng)
    theta.phi_y = update_phi_Y(theta, data, latent, config, rng, target=latent.V)
    latent.S = update_S(theta, data, latent, config, rng)
    latent.C = update_C_mis(theta, data, latent, rng)
    latent.D = update_D_mis(theta, data, latent, config, rng)
    latent.D, latent.Y = impute_incidental_missing(theta, data, latent, config, rng)


@dataclass
class PosteriorDraws:
    """Retained draws of one chain (or several chains concatenated).

    ``params`` maps each :class:`ParameterState` field to an array with a
    leading draw axis. ``S``, ``C``, ``D`` and ``Y`` hold the completed latent
    arrays per draw. ``meta`` records seed, chain id, burn-in, thinning and
    the relabeling applied. ``chain`` gives each draw's chain id and
    ``label_orders`` the strata permutation applied to each draw (row ``k``
    of a draw's order is the sampler's label now called ``k``).
    """

    params: dict
    S: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    iterations: np.ndarray
    meta: dict = field(default_factory=dict)
    chain: Optional[np.ndarray] = None
    label_orders: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.iterations.shape[0]
        if self.chain is None:
            self.chain = np.full(n, int(self.meta.get("chain_id", 0)), dtype=np.int64)
        if self.label_orders is None:
            self.label_orders = np.tile(np.arange(self.params["pi"].shape[1]), (n, 1))

    def __len__(self):
        return self.iterations.shape[0]

    @property
    def K(self) -> int:
        return self.params["pi"].shape[1]

    def theta(self, i: int) -> ParameterState:
        kw = {}
        for name, arr in self.params.items():
            v = arr[i]
            kw[name] = float(v) if np.ndim(v) == 0 else np.array(v, dtype=float)
        return ParameterState(**kw)

    def latent(self, i: int) -> LatentState:
        return LatentState(
            S=self.S[i].astype(np.intp),
            C=self.C[i].copy(),
            D=self.D[i].astype(float),
            Y=self.Y[i].copy(),
        )

    def subset(self, index) -> "PosteriorDraws":
        index = np.asarray(index)
        return PosteriorDraws(
            params={k: v[index] for k, v in self.params.items()},
            S=self.S[index],
            C=self.C[index],
            D=self.D[index],
            Y=self.Y[index],
            iterations=self.iterations[index],
            meta=dict(self.meta),
            chain=self.chain[index],
            label_orders=self.label_orders[index],
        )

    def relabel_orders(self, key: int = 0, descending: bool = True) -> np.ndarray:
        """Per-draw strata orderings by the stratum mean of column ``key`` of ``[C, Z]``."""
        vals = self.params["mu_s"][:, :, key]
        return np.argsort(-vals if descending else vals, axis=1, kind="stable")

    def relabeled(self, key: int = 0, descending: bool = True) -> "PosteriorDraws":
        """Apply the ordering rule to every draw (strata parameters and ``S``)."""
        orders = self.relabel_orders(key, descending)
        n = len(self)
        rows = np.arange(n)[:, None]
        params = dict(self.params)
        for name in STRATA_FIELDS:
            params[name] = self.params[name][rows, orders]
        inverse = np.argsort(orders, axis=1)
        S = inverse[np.arange(n)[:, None], self.S.astype(np.intp)].astype(self.S.dtype)
        meta = dict(self.meta)
        meta["relabel"] = {"key": int(key), "descending": bool(descending)}
        composed = self.label_orders[rows, orders]
        return PosteriorDraws(params, S, self.C, self.D, self.Y, self.iterations, meta, self.chain, composed)

    @staticmethod
    def concatenate(parts) -> "PosteriorDraws":
        parts = list(parts)
        return PosteriorDraws(
            params={k: np.concatenate([p.params[k] for p in parts]) for k in parts[0].params},
            S=np.concatenate([p.S for p in parts]),
            C=np.concatenate([p.C for p in parts]),
            D=np.concatenate([p.D for p in parts]),
            Y=np.concatenate([p.Y for p in parts]),
            iterations=np.concatenate([p.iterations for p in parts]),
            meta={"chains": [p.meta for p in parts]},
            chain=np.concatenate([p.chain for p in parts]),
            label_orders=np.concatenate([p.label_orders for p in parts]),
        )

    def chains(self) -> list:
        """Split concatenated draws back into per-chain pieces, in chain-id order."""
        return [self.subset(np.flatnonzero(self.chain == c)) for c in np.unique(self.chain)]

    def scalar_columns(self) -> dict:
        """Every scalar parameter as a named column, e.g. ``mu_s[1,2]``, ``pi[1]`` (1-based)."""
        out = {}
        for name in ParameterState.__dataclass_fields__:
            arr = self.params[name]
            if arr.ndim == 1:
                out[name] = arr
                continue
            for idx in np.ndindex(*arr.shape[1:]):
                out[f"{name}[{','.join(str(i + 1) for i in idx)}]"] = arr[(slice(None),) + idx]
        return out


def _allocate(n, theta, data):
    params = {}
    for name in ParameterState.__dataclass_fields__:
        v = np.asarray(getattr(theta, name), dtype=float)
        params[name] = np.empty((n,) + v.shape)
    return PosteriorDraws(
        params=params,
        S=np.empty((n, data.n_clusters), dtype=np.int8),
        C=np.empty((n, data.n_clusters, data.n_compliance_metrics)),
        D=np.empty((n, data.n_individuals), dtype=np.int8),
        Y=np.empty((n, data.n_individuals)),
        iterations=np.empty(n, dtype=np.int64),
    )


def run_chain(
    data: TrialDataset,
    model_config: ModelConfig,
    priors: PriorSpec,
    chain_config: ChainConfig,
    init=None,
    rng=None,
) -> PosteriorDraws:
    """Run one chain and return its retained, relabeled draws.

    ``init`` may supply ``(theta, latent)`` starting values; ``rng`` overrides
    the generator derived from ``(seed, chain_id)``.
    """
    _check_inputs(data, model_config, priors)
    rng = rng if rng is not None else RngStream(chain_config.seed, chain_config.chain_id).generator()
    if init is None:
        theta, latent = initialize(data, model_config, priors, rng, chain_config.init)
    else:
        theta, latent = init[0].copy(), init[1].copy()

    n_keep = chain_config.n_retained
    draws = _allocate(n_keep, theta, data)
    slot = 0
    for m in range(1, chain_config.n_iterations + 1):
        try:
            with np.errstate(over="ignore", under="ignore"):
                gibbs_sweep(theta, latent, data, priors, model_config, rng)
        except SamplerError as exc:
            raise SamplerError(str(exc), iteration=m) from exc
        if m > chain_config.burn_in and (m - chain_config.burn_in) % chain_config.thin == 0:
            for name, arr in draws.params.items():
                arr[slot] = getattr(theta, name)
            draws.S[slot] = latent.S
            draws.C[slot] = latent.C
            draws.D[slot] = latent.D
            draws.Y[slot] = latent.Y
            draws.iterations[slot] = m
            slot += 1
        if m % 500 == 0:
            log.debug("chain %d: iteration %d/%d", chain_config.chain_id, m, chain_config.n_iterations)

    draws.chain[:] = chain_config.chain_id
    draws.meta = {
        "seed": int(chain_config.seed),
        "chain_id": int(chain_config.chain_id),
        "n_iterations": int(chain_config.n_iterations),
        "burn_in": int(chain_config.burn_in),
        "thin": int(chain_config.thin),
    }
    if chain_config.relabel != "none" and model_config.K > 1 and len(draws):
        draws = draws.relabeled(chain_config.relabel_key, chain_config.relabel == "descending")
    return draws


def _check_inputs(data, config, priors):
    if priors.K != config.K:
        raise ConfigError(f"prior has {priors.K} strata but the model has {config.K}")
    q = data.n_compliance_metrics + data.n_cluster_covariates
    if priors.dim != q:
        raise ConfigError(f"prior strata means have dimension {priors.dim}, data has {q}")
    if config.binary:
        y = data.Y[data.y_observed]
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ConfigError("binary outcome family requires outcomes coded 0/1")


# -- persistence ---------------------------------------------------------------------------------


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_table(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    return header, rows


def write_draws(draws: PosteriorDraws, data: TrialDataset, out_dir, extra_meta=None) -> dict:
    """Persist draws as CSV tables plus a JSON sidecar.

    ``draws.csv`` holds one row per retained iteration and one column per
    scalar parameter. ``latent_S.csv`` (1-based strata), ``latent_C.csv``
    (control-arm metrics), ``latent_D.csv`` (unobserved compliance) and
    ``latent_Y.csv`` (incidentally missing outcomes) hold the latent values.
    Floats are written with ``repr`` so that reading back is exact.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = [[int(c), int(m)] for c, m in zip(draws.chain, draws.iterations)]
    cols = draws.scalar_columns()
    _write_table(out / "draws.csv", ["chain", "iteration"] + list(cols), ([*k, *(repr(float(v[i])) for v in cols.values())] for i, k in enumerate(key)))
    _write_table(out / "latent_S.csv", ["chain", "iteration"] + list(data.cluster_ids), ([*k, *(int(s) + 1 for s in draws.S[i])] for i, k in enumerate(key)))
    ctrl = np.flatnonzero(data.W == 0)
    c_head = [f"{data.cluster_ids[i]}:C{q + 1}" for i in ctrl for q in range(data.n_compliance_metrics)]
    _write_table(out / "latent_C.csv", ["chain", "iteration"] + c_head, ([*k, *(repr(float(v)) for v in draws.C[i, ctrl].reshape(-1))] for i, k in enumerate(key)))
    d_rows = np.flatnonzero(~data.d_observed)
    _write_table(out / "latent_D.csv", ["chain", "iteration"] + [str(j) for j in d_rows], ([*k, *(int(v) for v in draws.D[i, d_rows])] for i, k in enumerate(key)))
    y_rows = np.flatnonzero(~data.y_observed)
    _write_table(out / "latent_Y.csv", ["chain", "iteration"] + [str(j) for j in y_rows], ([*k, *(repr(float(v)) for v in draws.Y[i, y_rows])] for i, k in enumerate(key)))
    meta = {
        "meta": draws.meta,
        "shapes": {name: list(arr.shape[1:]) for name, arr in draws.params.items()},
        "label_orders": draws.label_orders.tolist(),
        "n_clusters": data.n_clusters,
        "n_individuals": data.n_individuals,
    }
    if extra_meta:
        meta.update(extra_meta)
    (out / "draws.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return {name: out / name for name in ("draws.csv", "latent_S.csv", "latent_C.csv", "latent_D.csv", "latent_Y.csv", "draws.json")}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_draws(in_dir, data: TrialDataset) -> PosteriorDraws:
    """Inverse of :func:`write_draws`; observed cells are filled from ``data``."""
    src = Path(in_dir)
    meta = json.loads((src / "draws.json").read_text())
    if meta["n_clusters"] != data.n_clusters or meta["n_individuals"] != data.n_individuals:
        raise ValueError("draws were written for a different dataset")
    header, rows = _read_table(src / "draws.csv")
    n = len(rows)
    table = np.array([[float(v) for v in r] for r in rows]).reshape(n, len(header))
    chain = table[:, 0].astype(np.int64)
    iterations = table[:, 1].astype(np.int64)
    col = {name: table[:, j] for j, name in enumerate(header)}
    params = {}
    for name, shape in meta["shapes"].items():
        arr = np.empty((n, *shape))
        if not shape:
            arr[:] = col[name]
        else:
            for idx in np.ndindex(*shape):
                arr[(slice(None),) + idx] = col[f"{name}[{','.join(str(i + 1) for i in idx)}]"]
        params[name] = arr

    _, s_rows = _read_table(src / "latent_S.csv")
    S = np.array([[int(v) - 1 for v in r[2:]] for r in s_rows], dtype=np.int8).reshape(n, data.n_clusters)
    C = np.broadcast_to(np.where(np.isnan(data.C), 0.0, data.C), (n, *data.C.shape)).copy()
    _, c_rows = _read_table(src / "latent_C.csv")
    ctrl = np.flatnonzero(data.W == 0)
    if ctrl.size:
        C[:, ctrl] = np.array([[float(v) for v in r[2:]] for r in c_rows]).reshape(n, ctrl.size, data.n_compliance_metrics)
    D = np.broadcast_to(np.nan_to_num(data.D).astype(np.int8), (n, data.n_individuals)).copy()
    d_head, d_rows = _read_table(src / "latent_D.csv")
    if len(d_head) > 2:
        D[:, [int(j) for j in d_head[2:]]] = np.array([[int(v) for v in r[2:]] for r in d_rows], dtype=np.int8)
    Y = np.broadcast_to(np.nan_to_num(data.Y), (n, data.n_individuals)).copy()
    y_head, y_rows = _read_table(src / "latent_Y.csv")
    if len(y_head) > 2:
        Y[:, [int(j) for j in y_head[2:]]] = np.array([[float(v) for v in r[2:]] for r in y_rows])
    return PosteriorDraws(
        params=params,
        S=S,
        C=C,
        D=D,
        Y=Y,
        iterations=iterations,
        meta=meta["meta"],
        chain=chain,
        label_orders=np.array(meta["label_orders"], dtype=np.intp).reshape(n, -1),
    )
