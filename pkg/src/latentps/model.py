"""Parameter containers, priors, linear predictors and the augmented log posterior.

Strata are indexed ``0..K-1`` throughout the library; files and reports use
``1..K``. Coefficients that a configuration declares shared across strata are
still stored with one row per stratum (rows identical), so downstream code
never needs to branch on the sharing pattern.
"""

from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import log_ndtr

from .distributions import probit_inv, sample_dirichlet, sample_inverse_wishart, sample_mvn

__all__ = [
    "ConfigError",
    "ModelConfig",
    "PriorSpec",
    "ParameterState",
    "sample_prior",
    "compliance_prob",
    "marginal_compliance_prob",
    "outcome_mean",
    "compliance_linpred",
    "outcome_linpred",
    "log_joint",
    "log_joint_terms",
]

GAUSSIAN = "gaussian"
BINARY = "binary"
POOLED = "pooled"
STRATA = "strata"
SHARED = "shared"


class ConfigError(ValueError):
    """Invalid model, prior or chain configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Structural choices for the model.

    ``covariate_distribution`` selects the empirical covariate distribution used
    for super-population estimands: pooled over all individuals or restricted to
    clusters in the stratum. The three ``*_coefficients``/``*_variance``
    switches choose between per-stratum and shared parameters.
    """

    K: int = 2
    outcome_family: str = GAUSSIAN
    covariate_distribution: str = POOLED
    compliance_coefficients: str = STRATA
    outcome_coefficients: str = STRATA
    outcome_variance: str = STRATA

    def __post_init__(self):
        if int(self.K) < 1:
            raise ConfigError("K must be at least 1")
        choices = {
            "outcome_family": (GAUSSIAN, BINARY),
            "covariate_distribution": (POOLED, STRATA),
            "compliance_coefficients": (STRATA, SHARED),
            "outcome_coefficients": (STRATA, SHARED),
            "outcome_variance": (STRATA, SHARED),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def binary(self) -> bool:
        return self.outcome_family == BINARY

    @property
    def shared_alpha(self) -> bool:
        return self.compliance_coefficients == SHARED

    @property
    def shared_beta(self) -> bool:
        return self.outcome_coefficients == SHARED

    @property
    def shared_sigma(self) -> bool:
        return self.outcome_variance == SHARED

    @classmethod
    def simulation(cls, K=2):
        return cls(K=K)

    @classmethod
    def analysis(cls, K=2, outcome_family=GAUSSIAN):
        return cls(
            K=K,
            outcome_family=outcome_family,
            covariate_distribution=STRATA,
            compliance_coefficients=SHARED,
            outcome_coefficients=SHARED,
            outcome_variance=SHARED,
        )


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters. Variances are on the variance scale; ``*_upper`` are the
    truncation bounds of the random-effect variances (uniform prior on the
    standard deviation up to ``sqrt(upper)``)."""

    dirichlet: np.ndarray
    mu_s_mean: np.ndarray
    mu_s_cov: np.ndarray
    iw_scale: np.ndarray
    iw_dof: float
    mu_d_var: float
    alpha_var: float
    tau_d_upper: float
    mu_y_var: float
    beta_var: float
    delta1_var: float
    delta0_var: float
    tau_y_upper: float
    sigma_shape: float = 1.0
    sigma_rate: float = 1.0

    def __post_init__(self):
        for name in ("dirichlet", "mu_s_mean", "mu_s_cov", "iw_scale"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if self.dirichlet.ndim != 1 or not np.all(self.dirichlet > 0):
            raise ConfigError("dirichlet concentrations must be positive")
        q = self.mu_s_mean.shape[0]
        if self.mu_s_cov.shape != (q, q) or self.iw_scale.shape != (q, q):
            raise ConfigError("strata-mean prior and scale matrix must match the cluster dimension")
        for name in ("mu_s_cov", "iw_scale"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.any(np.linalg.eigvalsh(m) <= 0):
                raise ConfigError(f"{name} must be symmetric positive definite")
        if not self.iw_dof > q - 1:
            raise ConfigError("iw_dof must exceed the cluster dimension minus one")
        for name in (
            "mu_d_var",
            "alpha_var",
            "tau_d_upper",
            "mu_y_var",
            "beta_var",
            "delta1_var",
            "delta0_var",
            "tau_y_upper",
            "sigma_shape",
            "sigma_rate",
        ):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def K(self) -> int:
        return self.dirichlet.shape[0]

    @property
    def dim(self) -> int:
        return self.mu_s_mean.shape[0]

    @classmethod
    def simulation(cls, K: int, dim: int, **overrides) -> "PriorSpec":
        """Diffuse defaults used for the simulated case studies."""
        base = dict(
            dirichlet=np.full(K, 5.0),
            mu_s_mean=np.zeros(dim),
            mu_s_cov=100.0 * np.eye(dim),
            iw_scale=np.eye(dim) / 100.0,
            iw_dof=5.0,
            mu_d_var=100.0,
            alpha_var=1000.0,
            tau_d_upper=25.0,
            mu_y_var=1000.0,
            beta_var=1000.0,
            delta1_var=1000.0,
            delta0_var=1000.0,
            tau_y_upper=625.0,
            sigma_shape=1.0,
            sigma_rate=1.0,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def analysis(cls, K: int, n_compliance: int, n_cluster_cov: int, outcome_family: str = GAUSSIAN, **overrides) -> "PriorSpec":
        """Defaults of the applied analysis; the binary family tightens the outcome priors."""
        dim = n_compliance + n_cluster_cov
        mu_s_var = np.concatenate([np.full(n_compliance, 1000.0), np.full(n_cluster_cov, 10000.0)])
        base = dict(
            dirichlet=np.ones(K),
            mu_s_mean=np.zeros(dim),
            mu_s_cov=np.diag(mu_s_var),
            iw_scale=np.eye(dim) / 1000.0,
            iw_dof=5.0,
            mu_d_var=9.0,
            alpha_var=10.0,
            tau_d_upper=16.0,
            sigma_shape=1.0,
            sigma_rate=1.0,
        )
        if outcome_family == BINARY:
            base.update(mu_y_var=25.0, beta_var=25.0, delta1_var=25.0, delta0_var=1.0, tau_y_upper=10.0)
        else:
            base.update(mu_y_var=100.0**2, beta_var=100.0, delta1_var=100.0, delta0_var=16.0, tau_y_upper=225.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class ParameterState:
    """One draw of the model parameters.

    Array shapes: ``pi (K,)``, ``mu_s (K, q)``, ``sigma (q, q)``, ``mu_d (K,)``,
    ``alpha (K, M)``, ``phi_d (I,)``, ``mu_y (K,)``, ``beta0 (K, M)``,
    ``beta1 (K, M)``, ``delta1 (K,)``, ``delta0 (K,)``, ``sigma_sq (K,)``,
    ``phi_y (I,)``.
    """

    pi: np.ndarray
    mu_s: np.ndarray
    sigma: np.ndarray
    mu_d: np.ndarray
    alpha: np.ndarray
    tau_d_sq: float
    phi_d: np.ndarray
    mu_y: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    delta1: np.ndarray
    delta0: np.ndarray
    sigma_sq: np.ndarray
    tau_y_sq: float
    phi_y: np.ndarray

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    def copy(self) -> "ParameterState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return ParameterState(**kw)

    def permuted(self, order) -> "ParameterState":
        """Relabel strata: new stratum ``k`` is old stratum ``order[k]``."""
        order = np.asarray(order)
        return replace(
            self.copy(),
            pi=self.pi[order],
            mu_s=self.mu_s[order],
            mu_d=self.mu_d[order],
            alpha=self.alpha[order],
            mu_y=self.mu_y[order],
            beta0=self.beta0[order],
            beta1=self.beta1[order],
            delta1=self.delta1[order],
            delta0=self.delta0[order],
            sigma_sq=self.sigma_sq[order],
        )

    def check(self, priors: Optional[PriorSpec] = None):
        """Raise ``ValueError`` if a structural invariant is violated."""
        if abs(self.pi.sum() - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise ValueError("pi is not on the simplex")
        if np.any(np.linalg.eigvalsh(self.sigma) <= 0):
            raise ValueError("sigma is not positive definite")
        if not (self.tau_d_sq > 0 and self.tau_y_sq > 0 and np.all(self.sigma_sq > 0)):
            raise ValueError("variances must be positive")
        if priors is not None and (self.tau_d_sq > priors.tau_d_upper or self.tau_y_sq > priors.tau_y_upper):
            raise ValueError("random-effect variance above its truncation bound")


def sample_prior(priors: PriorSpec, config: ModelConfig, n_clusters: int, n_covariates: int, rng) -> ParameterState:
    """One parameter draw from the prior, cluster effects included.

    Shared coefficients and a shared outcome variance are drawn once and
    repeated across strata; the binary family fixes the outcome variances at 1.
    """
    K = config.K

    def coef(var, width, shared):
        rows = 1 if shared else K
        draw = np.sqrt(var) * rng.standard_normal((rows, width))
        return np.repeat(draw, K, axis=0) if shared else draw

    pi = sample_dirichlet(priors.dirichlet, rng)
    mu_s = np.array([sample_mvn(priors.mu_s_mean, priors.mu_s_cov, rng) for _ in range(K)])
    sigma = sample_inverse_wishart(priors.iw_scale, priors.iw_dof, rng)
    mu_d = coef(priors.mu_d_var, 1, False)[:, 0]
    alpha = coef(priors.alpha_var, n_covariates, config.shared_alpha)
    # Uniform prior on the standard deviation.
    tau_d_sq = float(priors.tau_d_upper * rng.random() ** 2)
    mu_y = coef(priors.mu_y_var, 1, False)[:, 0]
    beta0 = coef(priors.beta_var, n_covariates, config.shared_beta)
    beta1 = coef(priors.beta_var, n_covariates, config.shared_beta)
    delta1 = coef(priors.delta1_var, 1, False)[:, 0]
    delta0 = coef(priors.delta0_var, 1, False)[:, 0]
    if config.binary:
        sigma_sq = np.ones(K)
    else:
        n_sig = 1 if config.shared_sigma else K
        sigma_sq = priors.sigma_rate / rng.gamma(priors.sigma_shape, size=n_sig)
        sigma_sq = np.repeat(sigma_sq, K) if config.shared_sigma else sigma_sq
    tau_y_sq = float(priors.tau_y_upper * rng.random() ** 2)
    return ParameterState(
        pi=pi,
        mu_s=mu_s,
        sigma=sigma,
        mu_d=mu_d,
        alpha=alpha,
        tau_d_sq=tau_d_sq,
        phi_d=np.sqrt(tau_d_sq) * rng.standard_normal(n_clusters),
        mu_y=mu_y,
        beta0=beta0,
        beta1=beta1,
        delta1=delta1,
        delta0=delta0,
        sigma_sq=sigma_sq,
        tau_y_sq=tau_y_sq,
        phi_y=np.sqrt(tau_y_sq) * rng.standard_normal(n_clusters),
    )


# -- linear predictors ----------------------------------------------------------


def _rowdot(X, coef):
    return np.einsum("nm,nm->n", X, coef) if X.ndim == 2 else X @ coef


def compliance_linpred(theta: ParameterState, X, strata, phi=0.0):
    """``mu_d[s] + X alpha[s] + phi`` for arrays of individuals."""
    X = np.asarray(X, dtype=float)
    strata = np.asarray(strata)
    return theta.mu_d[strata] + _rowdot(X, theta.alpha[strata]) + phi


def outcome_linpred(theta: ParameterState, X, strata, w, d, phi=0.0):
    """Outcome mean (Gaussian) or probit linear predictor (binary).

    Treated arm: ``mu_y + X beta0 + d (X beta1 + delta1) + phi``.
    Control arm: ``mu_y + X beta0 + d delta0 + phi``. With ``d = 0`` both arms
    agree, which is the exclusion restriction.
    """
    X = np.asarray(X, dtype=float)
    strata = np.asarray(strata)
    base = theta.mu_y[strata] + _rowdot(X, theta.beta0[strata])
    treated_shift = _rowdot(X, theta.beta1[strata]) + theta.delta1[strata]
    return base + d * (w * treated_shift + (1 - w) * theta.delta0[strata]) + phi


def compliance_prob(x, k: int, i: int, theta: ParameterState):
    """Probability that an individual in cluster ``i`` (stratum ``k``) complies."""
    x = np.asarray(x, dtype=float)
    return probit_inv(theta.mu_d[k] + x @ theta.alpha[k] + theta.phi_d[i])


def marginal_compliance_prob(x, k: int, theta: ParameterState):
    """Compliance probability with the cluster effect integrated out."""
    x = np.asarray(x, dtype=float)
    return probit_inv((theta.mu_d[k] + x @ theta.alpha[k]) / np.sqrt(theta.tau_d_sq + 1.0))


def outcome_mean(w, d, x, k: int, i: int, theta: ParameterState):
    x = np.asarray(x, dtype=float)
    return theta.mu_y[k] + x @ theta.beta0[k] + d * (w * (x @ theta.beta1[k] + theta.delta1[k]) + (1 - w) * theta.delta0[k]) + theta.phi_y[i]


# -- augmented log posterior ------------------------------------------------------


def _log_tau_prior(tau_sq, upper):
    # Uniform prior on the standard deviation over (0, sqrt(upper)).
    if not 0 < tau_sq <= upper:
        return -np.inf
    return -np.log(2.0 * np.sqrt(upper)) - 0.5 * np.log(tau_sq)


def _coef_rows(a, shared):
    return a[:1] if shared else a


def log_joint_terms(dataset, latent, theta: ParameterState, priors: PriorSpec, config: ModelConfig) -> dict:
    """Augmented log posterior split into separable terms.

    Keys: ``prior`` (hyperprior densities of the parameters), ``random_effects``
    (cluster effects given their variances), ``mixture`` (strata allocation and
    cluster-level ``[C, Z]``), ``compliance`` (completed ``D``) and ``outcome``
    (observed outcomes plus imputed incidental ones).
    """
    K = config.K
    S = np.asarray(latent.S)
    cl = dataset.cluster_of
    X = dataset.X
    s_ind = S[cl]
    w_ind = dataset.W[cl].astype(float)
    D = np.asarray(latent.D, dtype=float)
    Y = np.asarray(latent.Y, dtype=float)

    lp = stats.dirichlet.logpdf(np.clip(theta.pi, 1e-300, 1.0), priors.dirichlet) if K > 1 else 0.0
    lp += sum(stats.multivariate_normal.logpdf(theta.mu_s[k], priors.mu_s_mean, priors.mu_s_cov) for k in range(K))
    lp += stats.invwishart.logpdf(theta.sigma, df=priors.iw_dof, scale=priors.iw_scale)
    lp += stats.norm.logpdf(theta.mu_d, 0.0, np.sqrt(priors.mu_d_var)).sum()
    lp += stats.norm.logpdf(_coef_rows(theta.alpha, config.shared_alpha), 0.0, np.sqrt(priors.alpha_var)).sum()
    lp += _log_tau_prior(theta.tau_d_sq, priors.tau_d_upper)
    lp += stats.norm.logpdf(theta.mu_y, 0.0, np.sqrt(priors.mu_y_var)).sum()
    lp += stats.norm.logpdf(_coef_rows(theta.beta0, config.shared_beta), 0.0, np.sqrt(priors.beta_var)).sum()
    lp += stats.norm.logpdf(_coef_rows(theta.beta1, config.shared_beta), 0.0, np.sqrt(priors.beta_var)).sum()
    lp += stats.norm.logpdf(theta.delta1, 0.0, np.sqrt(priors.delta1_var)).sum()
    lp += stats.norm.logpdf(theta.delta0, 0.0, np.sqrt(priors.delta0_var)).sum()
    if not config.binary:
        sig = theta.sigma_sq[:1] if config.shared_sigma else theta.sigma_sq
        lp += stats.invgamma.logpdf(sig, priors.sigma_shape, scale=priors.sigma_rate).sum()
    lp += _log_tau_prior(theta.tau_y_sq, priors.tau_y_upper)

    re = stats.norm.logpdf(theta.phi_d, 0.0, np.sqrt(theta.tau_d_sq)).sum()
    re += stats.norm.logpdf(theta.phi_y, 0.0, np.sqrt(theta.tau_y_sq)).sum()

    with np.errstate(divide="ignore"):
        mix = np.log(theta.pi[S]).sum()
    cz = np.column_stack([latent.C, dataset.Z])
    for k in range(K):
        rows = S == k
        if rows.any():
            mix += stats.multivariate_normal.logpdf(cz[rows], theta.mu_s[k], theta.sigma).sum()

    eta_d = compliance_linpred(theta, X, s_ind, theta.phi_d[cl])
    comp = np.where(D == 1, log_ndtr(eta_d), log_ndtr(-eta_d)).sum()

    eta_y = outcome_linpred(theta, X, s_ind, w_ind, D, theta.phi_y[cl])
    if config.binary:
        out = np.where(Y == 1, log_ndtr(eta_y), log_ndtr(-eta_y)).sum()
    else:
        out = stats.norm.logpdf(Y, eta_y, np.sqrt(theta.sigma_sq[s_ind])).sum()

    return {
        "prior": float(lp),
        "random_effects": float(re),
        "mixture": float(mix),
        "compliance": float(comp),
        "outcome": float(out),
    }


def log_joint(dataset, latent, theta: ParameterState, priors: PriorSpec, config: ModelConfig) -> float:
    """Log of the unnormalized augmented posterior (sum of :func:`log_joint_terms`)."""
    return float(sum(log_joint_terms(dataset, latent, theta, priors, config).values()))
