"""Completing potential outcomes for the trial and simulating new trials from a draw.

:func:`impute_Y_mis` fills in each individual's unobserved arm for the
finite-sample estimands. :func:`generate_superpop` draws fresh clusters from
the fitted model for the Monte Carlo super-population estimands.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .data_model import LatentState, MissingReason, TrialDataset, write_trial
from .model import STRATA, ModelConfig, ParameterState, compliance_linpred, outcome_linpred

__all__ = [
    "CompletedDataset",
    "SuperPopReplicate",
    "impute_Y_mis",
    "generate_superpop",
    "covariate_rows_by_stratum",
]


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """Both potential outcomes and compliance for every individual of the trial.

    ``y1_imputed``/``y0_imputed``/``d_imputed`` flag values that did not come
    from the observed data. ``S`` is the 0-based stratum of each cluster.
    """

    Y1: np.ndarray
    Y0: np.ndarray
    D: np.ndarray
    S: np.ndarray
    C: np.ndarray
    W: np.ndarray
    cluster_of: np.ndarray
    y1_imputed: np.ndarray
    y0_imputed: np.ndarray
    d_imputed: np.ndarray
    K: int

    @property
    def n_individuals(self) -> int:
        return self.Y1.shape[0]

    @property
    def strata_individual(self) -> np.ndarray:
        return self.S[self.cluster_of]

    def write(self, data: TrialDataset, cluster_path, individual_path):
        """Write in the trial CSV schema plus completed columns and a ``provenance`` column."""
        prov = np.where(self.y1_imputed & self.y0_imputed, "both_imputed", np.where(self.y1_imputed, "y1_imputed", "y0_imputed"))
        extra = {
            "D_completed": self.D.astype(int),
            "Y1": self.Y1,
            "Y0": self.Y0,
            "S": self.S[self.cluster_of] + 1,
            "provenance": prov,
        }
        write_trial(data, cluster_path, individual_path, extra_individual_columns=extra)


def impute_Y_mis(theta: ParameterState, latent: LatentState, data: TrialDataset, config: ModelConfig, rng) -> CompletedDataset:
    """Draw every individual's unobserved potential outcome at one posterior draw.

    The unobserved arm is ``1 - W``; its outcome comes from the outcome model
    at that arm, using the unit's completed compliance and cluster effect but
    not its own observed outcome.
    """
    cl = data.cluster_of
    w = data.W[cl].astype(float)
    s_ind = latent.S[cl]
    D = np.asarray(latent.D, dtype=float)
    eta = outcome_linpred(theta, data.X, s_ind, 1.0 - w, D, theta.phi_y[cl])
    if config.binary:
        y_mis = (rng.random(eta.shape[0]) < ndtr(eta)).astype(float)
    else:
        y_mis = eta + np.sqrt(theta.sigma_sq[s_ind]) * rng.standard_normal(eta.shape[0])

    y_obs_arm = np.where(data.y_observed, data.Y, latent.Y)
    treated = w == 1
    Y1 = np.where(treated, y_obs_arm, y_mis)
    Y0 = np.where(treated, y_mis, y_obs_arm)
    incidental = ~data.y_observed
    return CompletedDataset(
        Y1=Y1,
        Y0=Y0,
        D=D.astype(np.int8),
        S=np.asarray(latent.S, dtype=np.intp).copy(),
        C=np.asarray(latent.C).copy(),
        W=np.asarray(data.W).copy(),
        cluster_of=np.asarray(cl).copy(),
        y1_imputed=~treated | incidental,
        y0_imputed=treated | incidental,
        d_imputed=data.d_status != MissingReason.OBSERVED,
        K=config.K,
    )


@dataclass(frozen=True, eq=False)
class SuperPopReplicate:
    """``R`` stacked synthetic trials generated at one parameter draw.

    Cluster arrays have length ``R * I``; ``replicate`` gives each cluster's
    replicate index. ``CZ`` is ``None`` unless cluster metrics were requested.
    """

    S: np.ndarray
    replicate: np.ndarray
    cluster_of: np.ndarray
    X: np.ndarray
    D: np.ndarray
    Y1: np.ndarray
    Y0: np.ndarray
    CZ: Optional[np.ndarray]
    R: int

    @property
    def n_clusters(self) -> int:
        return self.S.shape[0]

    @property
    def strata_individual(self) -> np.ndarray:
        return self.S[self.cluster_of]


def covariate_rows_by_stratum(data: TrialDataset, config: ModelConfig, S=None):
    """Row indices of ``data.X`` that synthetic individuals of each stratum sample from.

    Pooled: every row for every stratum. Strata-specific: rows of clusters
    currently allocated to the stratum; a stratum with no clusters falls back
    to the pooled rows.
    """
    all_rows = np.arange(data.n_individuals)
    if config.covariate_distribution != STRATA:
        return [all_rows] * config.K
    if S is None:
        raise ValueError("strata-specific covariate distribution needs the latent strata")
    s_ind = np.asarray(S)[data.cluster_of]
    rows = []
    for k in range(config.K):
        r = np.flatnonzero(s_ind == k)
        rows.append(r if r.size else all_rows)
    return rows


def generate_superpop(
    theta: ParameterState,
    data: TrialDataset,
    config: ModelConfig,
    R: int,
    rng,
    S=None,
    cluster_metrics: bool = False,
) -> SuperPopReplicate:
    """Simulate ``R`` new trials with the study's cluster sizes at parameter draw ``theta``.

    Per cluster: stratum, then (optionally) ``[C, Z]``, then individual
    covariates, compliance and both potential outcomes. Cluster effects are
    fresh draws from their random-effect distributions. ``S`` is the latent
    allocation of the study clusters, needed only for strata-specific
    covariate distributions.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    K = config.K
    sizes = np.tile(data.cluster_sizes, R)
    n_cl = sizes.shape[0]
    strata = rng.choice(K, size=n_cl, p=theta.pi / theta.pi.sum())
    cz = None
    if cluster_metrics:
        chol = np.linalg.cholesky(theta.sigma)
        cz = theta.mu_s[strata] + rng.standard_normal((n_cl, chol.shape[0])) @ chol.T
    cluster_of = np.repeat(np.arange(n_cl), sizes)
    s_ind = strata[cluster_of]
    n = cluster_of.shape[0]

    rows_by_k = covariate_rows_by_stratum(data, config, S)
    pick = np.empty(n, dtype=np.intp)
    for k in range(K):
        mask = s_ind == k
        rows = rows_by_k[k]
        pick[mask] = rows[rng.integers(0, rows.shape[0], size=mask.sum())]
    X = data.X[pick]

    phi_d = np.sqrt(theta.tau_d_sq) * rng.standard_normal(n_cl)
    phi_y = np.sqrt(theta.tau_y_sq) * rng.standard_normal(n_cl)
    eta_d = compliance_linpred(theta, X, s_ind, phi_d[cluster_of])
    D = (rng.random(n) < ndtr(eta_d)).astype(np.int8)
    eta1 = outcome_linpred(theta, X, s_ind, 1.0, D, phi_y[cluster_of])
    eta0 = outcome_linpred(theta, X, s_ind, 0.0, D, phi_y[cluster_of])
    if config.binary:
        Y1 = (rng.random(n) < ndtr(eta1)).astype(float)
        Y0 = (rng.random(n) < ndtr(eta0)).astype(float)
    else:
        sd = np.sqrt(theta.sigma_sq[s_ind])
        Y1 = eta1 + sd * rng.standard_normal(n)
        Y0 = eta0 + sd * rng.standard_normal(n)
    return SuperPopReplicate(
        S=strata.astype(np.intp),
        replicate=np.repeat(np.arange(R), data.n_clusters),
        cluster_of=cluster_of,
        X=X,
        D=D,
        Y1=Y1,
        Y0=Y0,
        CZ=cz,
        R=int(R),
    )
