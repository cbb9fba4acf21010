"""Synthetic trials for the four case studies and the replication harness.

Case 1 draws every level from the model itself. Case 2 replaces the normal
mixture for ``[C, Z]`` by a skewed multivariate-t, case 3 replaces the probit
compliance link by a Burr link and case 4 adds an age-by-ADL interaction to
the outcome model. Cases differ only in those pieces: with a matched seed
they share the design, the covariates and every individual-level random
number.
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .data_model import TrialDataset, write_trial
from .distributions import RngStream, burr_link, probit_inv, sample_mvn, sample_skewed_mvt
from .estimands import closed_form_superpop, hdi
from .gibbs import ChainConfig, SamplerError, run_chain
from .model import ModelConfig, ParameterState, PriorSpec

__all__ = [
    "CaseStudySpec",
    "SimulationTruth",
    "covariate_pool",
    "generate_case_study",
    "true_estimands",
    "ESTIMAND_NAMES",
    "OperatingCharacteristics",
    "FitSettings",
    "ReplicationFit",
    "fit_replicate",
    "run_replication_study",
    "ReplicationAborted",
]

log = logging.getLogger(__name__)

ESTIMAND_NAMES = ("ITT", "ITT_1", "ITT_2", "CACE", "CACE_1", "CACE_2")

# Substreams of one seed; keeping them separate is what makes cases comparable.
_DESIGN_STREAM = 0
_MIXTURE_STREAM = 1
_INDIVIDUAL_STREAM = 2


@lru_cache(maxsize=1)
def _pool_raw() -> np.ndarray:
    with resources.files("latentps").joinpath("data/covariate_pool.csv").open() as fh:
        return np.loadtxt(fh, delimiter=",", skiprows=1)


def covariate_pool(standardized: bool = False) -> np.ndarray:
    """Bundled resident covariates (age, ADL), shape ``(n, 2)``.

    The standardized version (pool mean and sample sd) is the scale on which
    the generating coefficients act.
    """
    raw = _pool_raw()
    if not standardized:
        return raw.copy()
    return (raw - raw.mean(axis=0)) / raw.std(axis=0, ddof=1)


@dataclass(frozen=True)
class CaseStudySpec:
    """Generating constants for one case study.

    Pairs are indexed by true stratum. Stratum 1 (index 0) sits at
    ``[-2, -2]`` in ``[C, Z]``.
    """

    case_id: int = 1
    n_clusters: int = 60
    cluster_size: int = 20
    strata_probs: tuple = (0.5, 0.5)
    strata_means: tuple = ((-2.0, -2.0), (2.0, 2.0))
    variance_range: tuple = (0.5, 2.0)
    correlation_range: tuple = (-0.8, 0.8)
    compliance_intercepts: tuple = (0.0, 0.5)
    compliance_slopes: tuple = ((-0.25, -0.25), (-0.5, -0.5))
    compliance_re_var: float = 0.25
    outcome_intercepts: tuple = (2.0, 4.0)
    outcome_vars: tuple = (16.0, 16.0)
    control_complier_shift: tuple = (1.0, 2.0)
    treated_complier_shift: tuple = (5.5, 7.5)
    base_slopes: tuple = ((1.0, 1.0), (2.0, 2.0))
    treated_complier_slopes: tuple = ((1.0, 1.0), (2.0, 2.0))
    outcome_re_var: float = 9.0
    skew_dof: float = 5.0
    skew: float = 2.0
    burr_c: float = 0.5
    interaction: float = -2.0

    def __post_init__(self):
        if self.case_id not in (1, 2, 3, 4):
            raise ValueError("case_id must be 1, 2, 3 or 4")
        if self.n_clusters < 2 or self.cluster_size < 1:
            raise ValueError("need at least two clusters and one individual per cluster")

    @property
    def K(self) -> int:
        return len(self.strata_probs)

    @property
    def skewed_mixture(self) -> bool:
        return self.case_id == 2

    @property
    def burr_compliance(self) -> bool:
        return self.case_id == 3

    @property
    def has_interaction(self) -> bool:
        return self.case_id == 4

    def compliance_prob(self, X, strata, phi):
        a = np.asarray(self.compliance_intercepts)[strata]
        g = np.asarray(self.compliance_slopes)[strata]
        eta = a + np.einsum("nm,nm->n", X, g) + phi
        return burr_link(eta, self.burr_c) if self.burr_compliance else probit_inv(eta)

    def outcome_means(self, X, strata, D, phi):
        """Conditional means of ``(Y(1, D), Y(0, D))`` given everything but the noise."""
        m = np.asarray(self.outcome_intercepts)[strata]
        base = m + np.einsum("nm,nm->n", X, np.asarray(self.base_slopes)[strata]) + phi
        treated = np.einsum("nm,nm->n", X, np.asarray(self.treated_complier_slopes)[strata])
        treated = treated + np.asarray(self.treated_complier_shift)[strata]
        if self.has_interaction:
            inter = self.interaction * X[:, 0] * X[:, 1]
            base = base + inter
            treated = treated + inter
        y1 = base + D * treated
        y0 = base + D * np.asarray(self.control_complier_shift)[strata]
        return y1, y0

    def true_parameters(self, n_clusters: Optional[int] = None, sigma=None):
        """The generating constants as a :class:`ParameterState` on the pool-standardized scale.

        Only cases 1 and 2 lie in the model family at the individual level
        (case 3 uses another compliance link, case 4 an interaction). Cluster
        effects are zero; ``sigma`` defaults to the midpoint of the variance
        range with no correlation.
        """
        if self.burr_compliance or self.has_interaction:
            raise ValueError(f"case {self.case_id} is outside the model family")
        I = self.n_clusters if n_clusters is None else n_clusters
        K = self.K
        mid = 0.5 * sum(self.variance_range)
        return ParameterState(
            pi=np.asarray(self.strata_probs, dtype=float),
            mu_s=np.asarray(self.strata_means, dtype=float),
            sigma=mid * np.eye(2) if sigma is None else np.asarray(sigma, dtype=float),
            mu_d=np.asarray(self.compliance_intercepts, dtype=float),
            alpha=np.asarray(self.compliance_slopes, dtype=float),
            tau_d_sq=float(self.compliance_re_var),
            phi_d=np.zeros(I),
            mu_y=np.asarray(self.outcome_intercepts, dtype=float),
            beta0=np.asarray(self.base_slopes, dtype=float),
            beta1=np.asarray(self.treated_complier_slopes, dtype=float),
            delta1=np.asarray(self.treated_complier_shift, dtype=float),
            delta0=np.asarray(self.control_complier_shift, dtype=float),
            sigma_sq=np.asarray(self.outcome_vars, dtype=float)[:K],
            tau_y_sq=float(self.outcome_re_var),
            phi_y=np.zeros(I),
        )

    @classmethod
    def for_case(cls, case_id: int, **overrides) -> "CaseStudySpec":
        return cls(case_id=case_id, **overrides)


@dataclass(frozen=True, eq=False)
class SimulationTruth:
    """A generated trial and everything the observed data hides.

    ``S`` is 0-based. ``C_full`` holds compliance metrics for every cluster,
    ``D_full`` the compliance every individual would show if treated, and
    ``Y1``/``Y0`` both potential outcomes. ``X_model`` is the covariate
    matrix on the generating scale.
    """

    spec: CaseStudySpec
    seed: int
    dataset: TrialDataset
    S: np.ndarray
    C_full: np.ndarray
    Z: np.ndarray
    D_full: np.ndarray
    Y1: np.ndarray
    Y0: np.ndarray
    X_model: np.ndarray
    phi_d: np.ndarray
    phi_y: np.ndarray
    mixture_cov: np.ndarray

    def write(self, out_dir) -> dict:
        """Write ``clusters.csv``, ``individuals.csv``, ``truth_clusters.csv``,
        ``truth_individuals.csv`` and ``truth.json``; returns the path map."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "clusters": out / "clusters.csv",
            "individuals": out / "individuals.csv",
            "truth_clusters": out / "truth_clusters.csv",
            "truth_individuals": out / "truth_individuals.csv",
            "truth": out / "truth.json",
        }
        write_trial(self.dataset, paths["clusters"], paths["individuals"])
        with open(paths["truth_clusters"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster_id", "S", "C1", "phi_d", "phi_y"])
            for i, cid in enumerate(self.dataset.cluster_ids):
                w.writerow([cid, int(self.S[i]) + 1, repr(float(self.C_full[i, 0])), repr(float(self.phi_d[i])), repr(float(self.phi_y[i]))])
        with open(paths["truth_individuals"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster_id", "D1", "Y1", "Y0"])
            for j in range(self.D_full.shape[0]):
                cid = self.dataset.cluster_ids[self.dataset.cluster_of[j]]
                w.writerow([cid, int(self.D_full[j]), repr(float(self.Y1[j])), repr(float(self.Y0[j]))])
        meta = {"case_id": self.spec.case_id, "seed": self.seed, "mixture_cov": self.mixture_cov.tolist(), "spec": asdict(self.spec)}
        paths["truth"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return paths


def _mixture_covariance(spec, rng):
    v_c, v_z = rng.uniform(*spec.variance_range, size=2)
    rho = rng.uniform(*spec.correlation_range)
    off = rho * np.sqrt(v_c * v_z)
    return np.array([[v_c, off], [off, v_z]])


def generate_case_study(spec: CaseStudySpec, seed: int, pool: Optional[np.ndarray] = None) -> SimulationTruth:
    """Generate one trial of ``spec.n_clusters`` clusters with a 50/50 randomization.

    ``pool`` overrides the bundled raw covariate pool. Covariates are sampled
    with replacement from the pool and standardized by pool moments before
    entering the generating equations; the dataset stores the raw values.
    """
    raw_pool = covariate_pool() if pool is None else np.asarray(pool, dtype=float)
    std_pool = (raw_pool - raw_pool.mean(axis=0)) / raw_pool.std(axis=0, ddof=1)
    I, n = spec.n_clusters, spec.cluster_size
    N = I * n

    design = RngStream(seed, _DESIGN_STREAM).generator()
    W = np.zeros(I, dtype=np.int8)
    W[design.permutation(I)[: I // 2]] = 1
    S = design.choice(spec.K, size=I, p=np.asarray(spec.strata_probs))
    rows = design.integers(0, raw_pool.shape[0], size=N)
    X_raw, X = raw_pool[rows], std_pool[rows]
    cluster_of = np.repeat(np.arange(I), n)

    mix = RngStream(seed, _MIXTURE_STREAM).generator()
    cov = _mixture_covariance(spec, mix)
    means = np.asarray(spec.strata_means)
    if spec.skewed_mixture:
        cz = sample_skewed_mvt(np.zeros(2), cov, spec.skew_dof, spec.skew, mix, size=I) + means[S]
    else:
        cz = sample_mvn(np.zeros(2), cov, mix, size=I) + means[S]

    ind = RngStream(seed, _INDIVIDUAL_STREAM).generator()
    phi_d = np.sqrt(spec.compliance_re_var) * ind.standard_normal(I)
    u = ind.random(N)
    phi_y = np.sqrt(spec.outcome_re_var) * ind.standard_normal(I)
    eps1 = ind.standard_normal(N)
    eps0 = ind.standard_normal(N)

    s_ind = S[cluster_of]
    D_full = (u < spec.compliance_prob(X, s_ind, phi_d[cluster_of])).astype(np.int8)
    m1, m0 = spec.outcome_means(X, s_ind, D_full, phi_y[cluster_of])
    sd = np.sqrt(np.asarray(spec.outcome_vars))[s_ind]
    Y1 = m1 + sd * eps1
    Y0 = m0 + sd * eps0

    treated_ind = W[cluster_of] == 1
    C_obs = np.where(W[:, None] == 1, cz[:, :1], np.nan)
    D_obs = np.where(treated_ind, D_full, np.nan)
    Y_obs = np.where(treated_ind, Y1, Y0)
    dataset = TrialDataset.from_arrays(
        [f"c{i + 1:03d}" for i in range(I)], W, cz[:, 1:], C_obs, cluster_of, X_raw, D_obs, Y_obs
    )
    return SimulationTruth(
        spec=spec,
        seed=int(seed),
        dataset=dataset,
        S=S.astype(np.intp),
        C_full=cz[:, :1].copy(),
        Z=cz[:, 1:].copy(),
        D_full=D_full,
        Y1=Y1,
        Y0=Y0,
        X_model=X,
        phi_d=phi_d,
        phi_y=phi_y,
        mixture_cov=cov,
    )


# -- ground truth ----------------------------------------------------------------------


def _ratio_se(num, den):
    """Delta-method standard error of ``sum(num)/sum(den)`` over i.i.d. units."""
    n = num.shape[0]
    r = num.sum() / den.sum()
    resid = num - r * den
    return float(np.sqrt(resid.var(ddof=1) * n) / den.sum())


@lru_cache(maxsize=32)
def _true_estimands_cached(case_id, R_big, seed, chunk):
    spec = CaseStudySpec.for_case(case_id)
    pool = covariate_pool(standardized=True)
    rng = RngStream(seed, 0).generator()
    n = spec.cluster_size
    K = spec.K
    # Per-cluster sums: effect, compliers, complier effect, individuals; plus stratum.
    sums = {key: np.empty(R_big) for key in ("eff", "d", "n")}
    strata = np.empty(R_big, dtype=np.intp)
    for start in range(0, R_big, chunk):
        m = min(chunk, R_big - start)
        s = rng.choice(K, size=m, p=np.asarray(spec.strata_probs))
        X = pool[rng.integers(0, pool.shape[0], size=m * n)]
        s_ind = np.repeat(s, n)
        phi = np.repeat(np.sqrt(spec.compliance_re_var) * rng.standard_normal(m), n)
        D = (rng.random(m * n) < spec.compliance_prob(X, s_ind, phi)).astype(float)
        # Outcome noise and cluster effects cancel in Y(1) - Y(0) given D, so the
        # conditional-mean difference is used directly.
        y1, y0 = spec.outcome_means(X, s_ind, D, 0.0)
        eff = (y1 - y0).reshape(m, n).sum(axis=1)
        sums["eff"][start : start + m] = eff
        sums["d"][start : start + m] = D.reshape(m, n).sum(axis=1)
        sums["n"][start : start + m] = n
        strata[start : start + m] = s
    values, ses = {}, {}
    for label, mask in [("", np.ones(R_big, bool))] + [(f"_{k + 1}", strata == k) for k in range(K)]:
        eff, d, cnt = sums["eff"][mask], sums["d"][mask], sums["n"][mask]
        values["ITT" + label] = float(eff.sum() / cnt.sum())
        ses["ITT" + label] = _ratio_se(eff, cnt)
        values["CACE" + label] = float(eff.sum() / d.sum())
        ses["CACE" + label] = _ratio_se(eff, d)
    return values, ses


def true_estimands(case_id: int, R_big: int = 200_000, seed: int = 20240917, chunk: int = 20_000):
    """Monte Carlo ground truth of the six super-population estimands.

    ``R_big`` synthetic clusters of the case's size are drawn from the
    generating process. Cluster-level ``[C, Z]`` never enters the individual
    effects, so the mixture covariance need not be simulated. Returns
    ``(values, standard_errors)`` dicts keyed by :data:`ESTIMAND_NAMES`.
    """
    if R_big < 2:
        raise ValueError("R_big must be at least 2")
    values, ses = _true_estimands_cached(int(case_id), int(R_big), int(seed), int(chunk))
    return dict(values), dict(ses)


# -- replication harness ---------------------------------------------------------------


class ReplicationAborted(RuntimeError):
    """Too many replications failed."""


@dataclass(frozen=True)
class FitSettings:
    """MCMC budget and interval choice for each replication."""

    n_iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    interval: str = "hdi"
    prob: float = 0.95


@dataclass(frozen=True)
class ReplicationFit:
    replicate: int
    data_seed: int
    chain_seed: int
    estimates: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _replicate_seeds(seed, case_id, rep):
    state = np.random.SeedSequence([int(seed), int(case_id), int(rep)]).generate_state(2)
    return int(state[0]), int(state[1])


def fit_replicate(case_id: int, rep: int, seed: int = 0, settings: FitSettings = FitSettings()) -> ReplicationFit:
    """Generate replication ``rep`` of a case study, fit it and summarize the six estimands.

    Strata are relabeled in ascending order of the compliance-metric mean so
    that fitted stratum 1 corresponds to generating stratum 1. Numerical
    failures are returned in ``error`` rather than raised.
    """
    data_seed, chain_seed = _replicate_seeds(seed, case_id, rep)
    try:
        truth = generate_case_study(CaseStudySpec.for_case(case_id), data_seed)
        config = ModelConfig.simulation(K=2)
        priors = PriorSpec.simulation(K=2, dim=2)
        chain = ChainConfig(
            n_iterations=settings.n_iterations,
            burn_in=settings.burn_in,
            thin=settings.thin,
            seed=chain_seed,
            relabel="ascending",
        )
        draws = run_chain(truth.dataset, config, priors, chain)
        per_draw = [closed_form_superpop(draws.theta(i), truth.dataset, config) for i in range(len(draws))]
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return ReplicationFit(rep, data_seed, chain_seed, error=f"{type(exc).__name__}: {exc}")
    estimates, intervals = {}, {}
    tail = 0.5 * (1 - settings.prob)
    for name in ESTIMAND_NAMES:
        v = np.array([d.effect[name] for d in per_draw])
        v = v[~np.isnan(v)]
        estimates[name] = float(v.mean())
        if settings.interval == "hdi":
            intervals[name] = hdi(v, settings.prob)
        else:
            intervals[name] = tuple(float(q) for q in np.quantile(v, [tail, 1 - tail]))
    return ReplicationFit(rep, data_seed, chain_seed, estimates, intervals)


@dataclass(frozen=True)
class OperatingCharacteristics:
    """Coverage (%), bias, mean interval width and RMSE per estimand."""

    case_id: int
    n_reps: int
    n_failed: int
    truth: dict
    coverage: dict
    bias: dict
    interval_width: dict
    rmse: dict

    @classmethod
    def from_fits(cls, case_id, fits, truth):
        ok = [f for f in fits if not f.failed]
        cov, bias, width, rmse = {}, {}, {}, {}
        for name in ESTIMAND_NAMES:
            est = np.array([f.estimates[name] for f in ok])
            lo = np.array([f.intervals[name][0] for f in ok])
            hi = np.array([f.intervals[name][1] for f in ok])
            t = truth[name]
            cov[name] = float(100.0 * np.mean((lo <= t) & (t <= hi))) if ok else math.nan
            bias[name] = float(np.mean(est - t)) if ok else math.nan
            width[name] = float(np.mean(hi - lo)) if ok else math.nan
            rmse[name] = float(np.sqrt(np.mean((est - t) ** 2))) if ok else math.nan
        return cls(case_id, len(ok), len(fits) - len(ok), dict(truth), cov, bias, width, rmse)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimand", "truth", "coverage", "bias", "interval_width", "rmse", "n_reps", "n_failed"])
            for name in ESTIMAND_NAMES:
                w.writerow(
                    [name]
                    + [f"{v:.6g}" for v in (self.truth[name], self.coverage[name], self.bias[name], self.interval_width[name], self.rmse[name])]
                    + [self.n_reps, self.n_failed]
                )


def _fit_job(args):
    return fit_replicate(*args)


def run_replication_study(
    case_id: int,
    n_reps: int,
    fit_config: FitSettings = FitSettings(),
    parallelism: int = 1,
    seed: int = 0,
    truth: Optional[dict] = None,
    max_failure_rate: float = 0.02,
) -> OperatingCharacteristics:
    """Generate, fit and score ``n_reps`` replications of a case study.

    Each replication derives its data and chain seeds from ``(seed, case_id,
    replication index)``, so results do not depend on ``parallelism``.
    Failed replications are logged and excluded; more than
    ``max_failure_rate`` of ``n_reps`` failing raises :class:`ReplicationAborted`.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    truth = truth if truth is not None else true_estimands(case_id)[0]
    jobs = [(case_id, rep, seed, fit_config) for rep in range(n_reps)]
    limit = max_failure_rate * n_reps
    fits, failed = [], 0

    def record(fit):
        nonlocal failed
        fits.append(fit)
        if fit.failed:
            failed += 1
            log.warning("case %d replication %d failed: %s", case_id, fit.replicate, fit.error)
            if failed > limit:
                raise ReplicationAborted(f"{failed} of {n_reps} replications failed")

    if parallelism <= 1:
        for job in jobs:
            record(_fit_job(job))
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            try:
                for fit in pool.map(_fit_job, jobs, chunksize=max(1, n_reps // (4 * parallelism))):
                    record(fit)
            except ReplicationAborted:
                pool.shutdown(wait=False, cancel_futures=True)
                raise
    fits.sort(key=lambda f: f.replicate)
    return OperatingCharacteristics.from_fits(case_id, fits, truth)
