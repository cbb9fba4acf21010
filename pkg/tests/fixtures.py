"""Small synthetic trials drawn directly from the model's generative process.

Deliberately written without any sampler code so that it can serve as the
forward simulator for sampler checks.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from latentps.data_model import LatentState, TrialDataset
from latentps.model import ModelConfig, ParameterState, PriorSpec
from latentps.simulation import covariate_pool


@dataclass
class Design:
    W: np.ndarray
    sizes: np.ndarray
    X: np.ndarray
    n_compliance: int
    n_cluster_cov: int

    @property
    def cluster_of(self):
        return np.repeat(np.arange(self.W.shape[0]), self.sizes)

    @property
    def dim(self):
        return self.n_compliance + self.n_cluster_cov


def make_design(n_clusters=6, size=4, n_cov=1, n_compliance=1, n_cluster_cov=1, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    W = np.zeros(n_clusters, dtype=int)
    W[: n_clusters // 2] = 1
    sizes = np.full(n_clusters, size)
    X = rng.standard_normal((int(sizes.sum()), n_cov))
    return Design(W, sizes, X, n_compliance, n_cluster_cov)


def tiny_priors(K, dim, **overrides):
    """Proper, moderately informative priors with finite second moments everywhere."""
    base = dict(
        dirichlet=np.full(K, 2.0),
        mu_s_mean=np.zeros(dim),
        mu_s_cov=np.eye(dim),
        iw_scale=np.eye(dim) * (dim + 5.0),
        iw_dof=dim + 6.0,
        mu_d_var=1.0,
        alpha_var=1.0,
        tau_d_upper=2.0,
        mu_y_var=1.0,
        beta_var=1.0,
        delta1_var=1.0,
        delta0_var=1.0,
        tau_y_upper=2.0,
        sigma_shape=4.0,
        sigma_rate=3.0,
    )
    base.update(overrides)
    return PriorSpec(**base)


def _outcome_mean(theta, X, s, w, d, phi):
    b0 = np.einsum("ij,ij->i", X, theta.beta0[s])
    b1 = np.einsum("ij,ij->i", X, theta.beta1[s])
    return theta.mu_y[s] + b0 + d * (w * (b1 + theta.delta1[s]) + (1 - w) * theta.delta0[s]) + phi


def _draw_outcome(theta, config, X, s, w, d, phi, rng):
    eta = _outcome_mean(theta, X, s, w, d, phi)
    if config.binary:
        return (rng.random(eta.shape[0]) < ndtr(eta)).astype(float)
    return eta + np.sqrt(theta.sigma_sq[s]) * rng.standard_normal(eta.shape[0])


def _draw_compliance(theta, X, s, phi, rng):
    eta = theta.mu_d[s] + np.einsum("ij,ij->i", X, theta.alpha[s]) + phi
    return (rng.random(eta.shape[0]) < ndtr(eta)).astype(float)


def build_dataset(design, C_full, Z, D_full, Y):
    ctrl = design.W == 0
    C = C_full.copy()
    C[ctrl] = np.nan
    D = D_full.astype(float).copy()
    D[ctrl[design.cluster_of]] = np.nan
    ids = [f"c{i}" for i in range(design.W.shape[0])]
    return TrialDataset.from_arrays(ids, design.W, Z, C, design.cluster_of, design.X, D, Y, standardize=False)


def simulate_trial(theta: ParameterState, config: ModelConfig, design: Design, rng):
    """Draw strata, cluster metrics, compliance and observed outcomes.

    Returns ``(dataset, latent)`` with ``latent`` the complete truth.
    """
    I = design.W.shape[0]
    cl = design.cluster_of
    S = rng.choice(config.K, size=I, p=theta.pi)
    chol = np.linalg.cholesky(theta.sigma)
    cz = theta.mu_s[S] + rng.standard_normal((I, design.dim)) @ chol.T
    C_full, Z = cz[:, : design.n_compliance], cz[:, design.n_compliance :]
    s_ind = S[cl]
    D = _draw_compliance(theta, design.X, s_ind, theta.phi_d[cl], rng)
    Y = _draw_outcome(theta, config, design.X, s_ind, design.W[cl].astype(float), D, theta.phi_y[cl], rng)
    data = build_dataset(design, C_full, Z, D, Y)
    return data, LatentState(S=S.astype(np.intp), C=C_full.copy(), D=D, Y=Y.copy())


def regenerate_observed(theta, config, design, latent, rng):
    """Redraw the observed data given parameters and latent variables.

    Treated clusters get fresh ``[C, Z]``; control clusters get ``Z`` from its
    conditional given the latent ``C``. Treated compliance and all outcomes
    are redrawn. Returns ``(dataset, latent)`` with the new observed cells
    copied into the latent state.
    """
    ell = design.n_compliance
    cl = design.cluster_of
    S = latent.S
    treated = design.W == 1
    sig = theta.sigma
    chol = np.linalg.cholesky(sig)
    cz = np.column_stack([latent.C, np.zeros((S.shape[0], design.n_cluster_cov))])
    fresh = theta.mu_s[S] + rng.standard_normal(cz.shape) @ chol.T
    cz[treated] = fresh[treated]
    if design.n_cluster_cov:
        s_cc, s_cz, s_zz = sig[:ell, :ell], sig[:ell, ell:], sig[ell:, ell:]
        gain = s_cz.T @ np.linalg.inv(s_cc)
        cov = s_zz - gain @ s_cz
        ctrl = ~treated
        mean = theta.mu_s[S[ctrl], ell:] + (latent.C[ctrl] - theta.mu_s[S[ctrl], :ell]) @ gain.T
        cz[ctrl, ell:] = mean + rng.standard_normal(mean.shape) @ np.linalg.cholesky(cov).T
    C_full, Z = cz[:, :ell], cz[:, ell:]

    s_ind = S[cl]
    D = np.asarray(latent.D, dtype=float).copy()
    t_ind = treated[cl]
    D[t_ind] = _draw_compliance(theta, design.X[t_ind], s_ind[t_ind], theta.phi_d[cl][t_ind], rng)
    Y = _draw_outcome(theta, config, design.X, s_ind, design.W[cl].astype(float), D, theta.phi_y[cl], rng)
    data = build_dataset(design, C_full, Z, D, Y)
    return data, LatentState(S=S.copy(), C=C_full.copy(), D=D, Y=Y.copy())


def blank_theta(K=1, q=2, M=1, I=1, **over):
    """Neutral parameters (zeros, unit variances) with selected fields overridden."""
    base = dict(
        pi=np.full(K, 1.0 / K),
        mu_s=np.zeros((K, q)),
        sigma=np.eye(q),
        mu_d=np.zeros(K),
        alpha=np.zeros((K, M)),
        tau_d_sq=1.0,
        phi_d=np.zeros(I),
        mu_y=np.zeros(K),
        beta0=np.zeros((K, M)),
        beta1=np.zeros((K, M)),
        delta1=np.zeros(K),
        delta0=np.zeros(K),
        sigma_sq=np.ones(K),
        tau_y_sq=1.0,
        phi_y=np.zeros(I),
    )
    base.update({k: np.asarray(v, dtype=float) if not np.isscalar(v) else v for k, v in over.items()})
    return ParameterState(**base)


def dataset(W, sizes, X, C, Z, D, Y):
    """Unstandardized dataset from per-cluster ``C``/``Z`` and per-individual ``X``/``D``/``Y``."""
    W = np.asarray(W)
    cluster_of = np.repeat(np.arange(W.shape[0]), sizes)
    return TrialDataset.from_arrays([f"c{i}" for i in range(W.shape[0])], W, Z, C, cluster_of, X, D, Y, standardize=False)


def pool_dataset():
    """The standardized covariate pool laid out as one trial (clusters of 16), so its pooled covariate distribution is the pool."""
    pool = covariate_pool(standardized=True)
    n = pool.shape[0]
    cl = np.arange(n) // 16
    I = int(cl.max()) + 1
    W = np.arange(I) % 2
    return TrialDataset.from_arrays(
        [f"p{i}" for i in range(I)],
        W,
        np.zeros((I, 1)),
        np.where(W[:, None] == 1, 0.0, np.nan),
        cl,
        pool,
        np.where(W[cl] == 1, 1.0, np.nan),
        np.zeros(n),
        standardize=False,
    )
