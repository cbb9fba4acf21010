"""Convergence and fit diagnostics.

* :func:`gelman_rubin`: potential scale reduction across chains.
* :func:`detect_label_switching`: how often the strata ordering rule had to
  permute a chain's labels.
* :func:`pppv`: posterior predictive p-values for the signal (SI), noise (NO)
  and signal-to-noise (SINO) discrepancies among compliers of a stratum.
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .imputation import CompletedDataset, impute_Y_mis
from .model import ModelConfig, compliance_linpred, outcome_linpred

__all__ = [
    "gelman_rubin",
    "rhat_table",
    "LabelSwitchReport",
    "detect_label_switching",
    "raw_strata_trajectories",
    "DiscrepancyMeasure",
    "PPPVResult",
    "pppv",
    "replicate_study",
    "posterior_predictive_check",
    "write_pppv_table",
]


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor of equal-length scalar chains.

    ``sqrt(1 + B / (n W))`` with ``B`` the between-chain variance (``n`` times
    the variance of chain means) and ``W`` the mean within-chain variance.
    Equals 1 for identical chains and is never below 1. Returns ``nan`` when
    every chain is constant.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two chains as a (chains, draws) array")
    m, n = x.shape
    if n < 2:
        raise ValueError("chains need at least two draws")
    within = x.var(axis=1, ddof=1).mean()
    if within == 0:
        return math.nan
    between = n * x.mean(axis=1).var(ddof=1)
    return float(np.sqrt(1.0 + between / (n * within)))


def rhat_table(per_chain: dict) -> dict:
    """R-hat for every named quantity; values are ``(chains, draws)`` arrays."""
    return {name: gelman_rubin(v) for name, v in per_chain.items()}


@dataclass(frozen=True)
class LabelSwitchReport:
    """Per chain: the modal strata ordering and the draws that deviate from it."""

    modal_orders: tuple
    switched: tuple
    n_draws: int

    @property
    def n_switches(self) -> int:
        return int(sum(int(np.sum(s)) for s in self.switched))

    @property
    def rate(self) -> float:
        return self.n_switches / self.n_draws if self.n_draws else 0.0


def detect_label_switching(trajectories, descending: bool = True) -> LabelSwitchReport:
    """Flag draws whose strata ordering differs from their chain's modal ordering.

    ``trajectories`` has shape ``(chains, draws, K)``: the sampler's raw
    (unrelabeled) stratum means of the ordering variable.
    """
    t = np.asarray(trajectories, dtype=float)
    if t.ndim == 2:
        t = t[None]
    orders = np.argsort(-t if descending else t, axis=2, kind="stable")
    modal, switched = [], []
    for c in range(t.shape[0]):
        keys = [tuple(o) for o in orders[c]]
        mode = Counter(keys).most_common(1)[0][0] if keys else ()
        modal.append(mode)
        switched.append(np.array([k != mode for k in keys], dtype=bool))
    return LabelSwitchReport(tuple(modal), tuple(switched), int(t.shape[0] * t.shape[1]))


def raw_strata_trajectories(draws, key: int = 0) -> np.ndarray:
    """Undo the relabeling of each draw and return ``(chains, draws, K)`` stratum means of column ``key``."""
    out = []
    for part in draws.chains():
        vals = part.params["mu_s"][:, :, key]
        raw = np.empty_like(vals)
        rows = np.arange(vals.shape[0])[:, None]
        raw[rows, part.label_orders] = vals
        out.append(raw)
    n = min(p.shape[0] for p in out)
    return np.stack([p[:n] for p in out])


# -- posterior predictive checks --------------------------------------------------------------


SI, NO, SINO = "SI", "NO", "SINO"


@dataclass(frozen=True)
class DiscrepancyMeasure:
    """Signal, noise or their ratio among compliers of stratum ``stratum`` (0-based).

    Over completed data, with ``Y1``/``Y0`` the two potential outcomes of the
    stratum's compliers in both arms: ``SI = |mean(Y1) - mean(Y0)|`` and
    ``NO = sqrt(var(Y1)/n + var(Y0)/n)``.
    """

    kind: str
    stratum: int

    def __post_init__(self):
        if self.kind not in (SI, NO, SINO):
            raise ValueError("kind must be SI, NO or SINO")

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.stratum + 1}"

    def components(self, completed: CompletedDataset):
        """``(SI, NO)`` or ``None`` when the complier set is too small."""
        mask = (completed.strata_individual == self.stratum) & (completed.D == 1)
        n = int(mask.sum())
        if n < 2:
            return None
        y1, y0 = completed.Y1[mask], completed.Y0[mask]
        si = abs(y1.mean() - y0.mean())
        no = math.sqrt(y1.var(ddof=1) / n + y0.var(ddof=1) / n)
        return si, no

    def evaluate(self, completed: CompletedDataset) -> float:
        parts = self.components(completed)
        if parts is None:
            return math.nan
        si, no = parts
        if self.kind == SI:
            return float(si)
        if self.kind == NO:
            return float(no)
        return float(si / no) if no > 0 else math.nan


def replicate_study(theta, latent, data, config: ModelConfig, rng) -> CompletedDataset:
    """A replicated trial with the study's clusters, arms, covariates and strata.

    Compliance and both potential outcomes are drawn from the model at
    ``theta`` with the draw's cluster effects and strata.
    """
    cl = data.cluster_of
    s_ind = np.asarray(latent.S)[cl]
    n = data.n_individuals
    D = (rng.random(n) < ndtr(compliance_linpred(theta, data.X, s_ind, theta.phi_d[cl]))).astype(np.int8)
    eta1 = outcome_linpred(theta, data.X, s_ind, 1.0, D, theta.phi_y[cl])
    eta0 = outcome_linpred(theta, data.X, s_ind, 0.0, D, theta.phi_y[cl])
    if config.binary:
        Y1 = (rng.random(n) < ndtr(eta1)).astype(float)
        Y0 = (rng.random(n) < ndtr(eta0)).astype(float)
    else:
        sd = np.sqrt(theta.sigma_sq[s_ind])
        Y1 = eta1 + sd * rng.standard_normal(n)
        Y0 = eta0 + sd * rng.standard_normal(n)
    ones = np.ones(n, dtype=bool)
    return CompletedDataset(
        Y1=Y1,
        Y0=Y0,
        D=D,
        S=np.asarray(latent.S, dtype=np.intp).copy(),
        C=np.asarray(latent.C).copy(),
        W=np.asarray(data.W).copy(),
        cluster_of=np.asarray(cl).copy(),
        y1_imputed=ones,
        y0_imputed=ones,
        d_imputed=ones,
        K=config.K,
    )


@dataclass(frozen=True)
class PPPVResult:
    measure: str
    pppv: float
    n_used: int
    n_skipped: int


def _draw_rng(seed, chain, iteration):
    # Keyed by the draw's identity so that results do not depend on draw order.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(chain), int(iteration)))))


def _paired_statistics(draws, data, config, measures, seed):
    """Per draw and measure: ``(T_obs, T_rep)``; ``nan`` where undefined."""
    out = np.full((len(draws), len(measures), 2), np.nan)
    for i in range(len(draws)):
        rng = _draw_rng(seed, draws.chain[i], draws.iterations[i])
        theta, latent = draws.theta(i), draws.latent(i)
        observed = impute_Y_mis(theta, latent, data, config, rng)
        replicated = replicate_study(theta, latent, data, config, rng)
        for j, m in enumerate(measures):
            out[i, j] = (m.evaluate(observed), m.evaluate(replicated))
    return out


def _pppv_from_pairs(pairs, label):
    ok = ~np.isnan(pairs).any(axis=1)
    n_used = int(ok.sum())
    p = float(np.mean(pairs[ok, 1] > pairs[ok, 0])) if n_used else math.nan
    return PPPVResult(label, p, n_used, int((~ok).sum()))


def pppv(draws, data, config: ModelConfig, measure, seed: int = 0) -> PPPVResult:
    """Fraction of draws with ``T_rep > T_obs`` (strict; ties count as not exceeding).

    ``T_obs`` is the measure on the study data completed at the draw and
    ``T_rep`` the measure on a trial replicated at the draw. Draws where the
    measure is undefined are skipped and counted.
    """
    pairs = _paired_statistics(draws, data, config, [measure], seed)[:, 0]
    return _pppv_from_pairs(pairs, getattr(measure, "label", str(measure)))


def posterior_predictive_check(draws, data, config: ModelConfig, seed: int = 0, kinds=(SI, NO, SINO)) -> list:
    """PPPVs of every discrepancy kind in every stratum, sharing one replication per draw."""
    measures = [DiscrepancyMeasure(kind, k) for k in range(config.K) for kind in kinds]
    pairs = _paired_statistics(draws, data, config, measures, seed)
    return [_pppv_from_pairs(pairs[:, j], m.label) for j, m in enumerate(measures)]


def write_pppv_table(results, path, outcome: str = "Y"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome", "measure", "stratum", "pppv", "n_used", "n_skipped"])
        for r in results:
            kind, stratum = r.measure.rsplit("_", 1)
            w.writerow([outcome, kind, stratum, f"{r.pppv:.6g}", r.n_used, r.n_skipped])
