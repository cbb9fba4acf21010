"""ITT and CACE estimands, overall and per stratum, with posterior summaries.

Three routes compute per-draw values:

* finite-sample, from a completed dataset (:func:`finite_sample_estimands`);
* super-population in closed form for Gaussian outcomes
  (:func:`closed_form_superpop`);
* super-population by simulating new trials at the draw
  (:func:`montecarlo_superpop`), for either outcome family.

Each route returns :class:`DrawEstimates` holding the treatment-arm mean,
control-arm mean and their difference for every estimand. Names are
``ITT``, ``ITT_k``, ``CACE`` and ``CACE_k`` with ``k`` counted from 1.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .imputation import CompletedDataset, covariate_rows_by_stratum, generate_superpop, impute_Y_mis
from .model import ConfigError, ModelConfig, ParameterState, marginal_compliance_prob

__all__ = [
    "estimand_names",
    "contrast_names",
    "DrawEstimates",
    "finite_sample_estimands",
    "closed_form_superpop",
    "montecarlo_superpop",
    "hdi",
    "PosteriorSummary",
    "summarize_posterior",
    "EstimandRow",
    "EstimandReport",
    "PosteriorEstimands",
    "posterior_estimands",
    "build_report",
]

log = logging.getLogger(__name__)

# Fewer retained draws than this and interval summaries carry a warning.
MIN_DRAWS_FOR_INTERVALS = 20


def estimand_names(K: int) -> list:
    return ["ITT"] + [f"ITT_{k + 1}" for k in range(K)] + ["CACE"] + [f"CACE_{k + 1}" for k in range(K)]


def contrast_names(K: int) -> list:
    """Pairwise strata contrasts ``ITT_a-ITT_b`` and ``CACE_a-CACE_b`` for ``a < b``."""
    out = []
    for kind in ("ITT", "CACE"):
        for a in range(1, K + 1):
            for b in range(a + 1, K + 1):
                out.append(f"{kind}_{a}-{kind}_{b}")
    return out


@dataclass
class DrawEstimates:
    """Arm means and effects of every estimand at one draw; ``nan`` where undefined."""

    effect: dict
    treatment: dict
    control: dict

    def with_contrasts(self, K: int) -> dict:
        out = dict(self.effect)
        for name in contrast_names(K):
            a, b = name.split("-")
            out[name] = self.effect[a] - self.effect[b]
        return out


def _ratio(num, den):
    return float(num / den) if den > 0 else math.nan


def _plug_in(y1, y0, D, s_ind, K, arm_means=True):
    """Plug-in estimands over one stacked set of individuals."""
    diff = y1 - y0
    eff, tr, co = {}, {}, {}
    sets = [("", np.ones(diff.shape[0], bool))] + [(f"_{k + 1}", s_ind == k) for k in range(K)]
    d1 = D == 1
    for label, mask in sets:
        n = mask.sum()
        eff["ITT" + label] = _ratio(diff[mask].sum(), n)
        tr["ITT" + label] = _ratio(y1[mask].sum(), n)
        co["ITT" + label] = _ratio(y0[mask].sum(), n)
        cm = mask & d1
        nc = cm.sum()
        eff["CACE" + label] = _ratio(diff[cm].sum(), nc)
        tr["CACE" + label] = _ratio(y1[cm].sum(), nc)
        co["CACE" + label] = _ratio(y0[cm].sum(), nc)
    return DrawEstimates(eff, tr, co)


def finite_sample_estimands(completed: CompletedDataset) -> DrawEstimates:
    """Finite-sample ITT and CACE over the trial's own individuals.

    ``CACE_k`` is ``nan`` when stratum ``k`` holds no compliers at this draw.
    """
    return _plug_in(completed.Y1, completed.Y0, completed.D, completed.strata_individual, completed.K)


def closed_form_superpop(theta: ParameterState, data, config: ModelConfig, S=None) -> DrawEstimates:
    """Super-population estimands as functions of one parameter draw (Gaussian outcomes).

    With ``p_k(x)`` the compliance probability with the cluster effect
    integrated out and expectations over the empirical covariate
    distribution of stratum ``k`` (pooled or strata-specific):

    * ``ITT_k = E_k[p_k(X) (X beta1_k + delta1_k - delta0_k)]``
    * ``CACE_k = E_k[p_k(X) X beta1_k] / E_k[p_k(X)] + delta1_k - delta0_k``
    * ``ITT = sum_k pi_k ITT_k``, ``CACE = sum_k pi_k E_k[p_k] CACE_k / sum_k pi_k E_k[p_k]``.

    Arm means add the terms that cancel in the differences (intercept and
    ``X beta0``).
    """
    if config.binary:
        raise ConfigError("closed-form super-population estimands exist only for Gaussian outcomes; use montecarlo_superpop")
    K = config.K
    rows_by_k = covariate_rows_by_stratum(data, config, S)
    pi = theta.pi
    eff, tr, co = {}, {}, {}
    itt_parts = np.zeros((3, K))  # treatment, control, effect
    cace_num = np.zeros((3, K))
    mass = np.zeros(K)
    for k in range(K):
        X = data.X[rows_by_k[k]]
        p = marginal_compliance_prob(X, k, theta)
        base = theta.mu_y[k] + X @ theta.beta0[k]
        shift1 = X @ theta.beta1[k] + theta.delta1[k]
        shift0 = theta.delta0[k]
        mean_p = p.mean()
        y1 = (base + p * shift1).mean()
        y0 = (base + p * shift0).mean()
        eff[f"ITT_{k + 1}"] = y1 - y0
        tr[f"ITT_{k + 1}"] = y1
        co[f"ITT_{k + 1}"] = y0
        itt_parts[:, k] = (y1, y0, y1 - y0)
        # Complier-weighted means: E_k[p Y(w)] / E_k[p].
        c1 = (p * (base + shift1)).mean()
        c0 = (p * (base + shift0)).mean()
        cace_num[:, k] = (c1, c0, c1 - c0)
        mass[k] = mean_p
        tr[f"CACE_{k + 1}"] = _ratio(c1, mean_p)
        co[f"CACE_{k + 1}"] = _ratio(c0, mean_p)
        eff[f"CACE_{k + 1}"] = _ratio(c1 - c0, mean_p)
    tr["ITT"], co["ITT"], eff["ITT"] = itt_parts @ pi
    den = float(pi @ mass)
    tr["CACE"], co["CACE"], eff["CACE"] = (_ratio(v, den) for v in cace_num @ pi)
    return DrawEstimates(*({k: float(v) for k, v in d.items()} for d in (eff, tr, co)))


@dataclass
class MonteCarloEstimates(DrawEstimates):
    """:class:`DrawEstimates` plus Monte Carlo standard errors of the effects."""

    se: dict = field(default_factory=dict)


def montecarlo_superpop(theta: ParameterState, data, config: ModelConfig, R: int, rng, S=None, chunk: Optional[int] = None) -> MonteCarloEstimates:
    """Super-population estimands by simulating ``R`` new trials at one draw.

    The plug-in estimands are computed on the stacked replicates. Replicates
    are generated in chunks and reduced to per-replicate sums, from which the
    Monte Carlo standard errors follow by the delta method for ratios.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    K = config.K
    if chunk is None:
        chunk = max(1, 2_000_000 // max(data.n_individuals, 1))
    # Per replicate and per set (overall, then strata): sums of
    # n, y1, y0, compliers, complier y1, complier y0.
    n_sets = K + 1
    sums = np.zeros((R, n_sets, 6))
    done = 0
    while done < R:
        m = min(chunk, R - done)
        rep = generate_superpop(theta, data, config, m, rng, S=S)
        rep_ind = rep.replicate[rep.cluster_of]
        s_ind = rep.strata_individual
        d = rep.D.astype(float)
        cols = np.column_stack([np.ones_like(d), rep.Y1, rep.Y0, d, d * rep.Y1, d * rep.Y0])
        for j in range(n_sets):
            mask = np.ones_like(d, bool) if j == 0 else s_ind == j - 1
            for c in range(6):
                sums[done : done + m, j, c] = np.bincount(rep_ind[mask], weights=cols[mask, c], minlength=m)
        done += m
    total = sums.sum(axis=0)
    eff, tr, co, se = {}, {}, {}, {}
    for j in range(n_sets):
        label = "" if j == 0 else f"_{j}"
        n, y1, y0, nc, c1, c0 = total[j]
        tr["ITT" + label] = _ratio(y1, n)
        co["ITT" + label] = _ratio(y0, n)
        eff["ITT" + label] = _ratio(y1 - y0, n)
        se["ITT" + label] = _ratio_se(sums[:, j, 1] - sums[:, j, 2], sums[:, j, 0])
        tr["CACE" + label] = _ratio(c1, nc)
        co["CACE" + label] = _ratio(c0, nc)
        eff["CACE" + label] = _ratio(c1 - c0, nc)
        se["CACE" + label] = _ratio_se(sums[:, j, 4] - sums[:, j, 5], sums[:, j, 3])
    return MonteCarloEstimates(eff, tr, co, se)


def _ratio_se(num, den):
    """Delta-method standard error of ``sum(num) / sum(den)`` over i.i.d. replicates."""
    total = den.sum()
    if total <= 0 or num.shape[0] < 2:
        return math.nan
    r = num.sum() / total
    return float(np.sqrt((num - r * den).var(ddof=1) * num.shape[0]) / total)


# -- posterior summaries -------------------------------------------------------------------


def hdi(values, prob: float = 0.95):
    """Shortest interval containing ``ceil(prob * n)`` of the sorted draws."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.shape[0]
    if n == 0:
        return (math.nan, math.nan)
    m = min(n, max(1, int(math.ceil(prob * n))))
    widths = x[m - 1 :] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return (float(x[i]), float(x[i + m - 1]))


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    central: tuple
    hdi: tuple
    n_draws: int
    n_undefined: int = 0
    warning: Optional[str] = None


def summarize_posterior(values, prob: float = 0.95) -> PosteriorSummary:
    """Mean, standard deviation, central and highest-density intervals of per-draw values.

    ``nan`` values (estimand undefined at that draw) are excluded and counted.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    undefined = int(np.isnan(v).sum())
    v = v[~np.isnan(v)]
    if v.shape[0] < 2:
        raise ValueError("at least two defined draws are needed for a posterior summary")
    warning = None
    if v.shape[0] < MIN_DRAWS_FOR_INTERVALS:
        warning = f"only {v.shape[0]} draws; intervals are unreliable"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    tail = 0.5 * (1.0 - prob)
    lo, hi = np.quantile(v, [tail, 1.0 - tail])
    mean = float(v.mean())
    return PosteriorSummary(
        mean=mean,
        sd=float(v.std(ddof=1)),
        central=(float(min(lo, mean)), float(max(hi, mean))),
        hdi=hdi(v, prob),
        n_draws=int(v.shape[0]),
        n_undefined=undefined,
        warning=warning,
    )


@dataclass
class PosteriorEstimands:
    """Per-draw estimand values for one population.

    ``effect``, ``treatment`` and ``control`` map names to arrays over draws;
    ``effect`` also holds strata contrasts.
    """

    population: str
    procedure: int
    effect: dict
    treatment: dict
    control: dict
    K: int

    @classmethod
    def from_draws(cls, population, procedure, per_draw, K):
        names = estimand_names(K)
        effect = {n: np.array([d.with_contrasts(K)[n] for d in per_draw]) for n in names + contrast_names(K)}
        treatment = {n: np.array([d.treatment[n] for d in per_draw]) for n in names}
        control = {n: np.array([d.control[n] for d in per_draw]) for n in names}
        return cls(population, procedure, effect, treatment, control, K)


def posterior_estimands(draws, data, config: ModelConfig, rng, superpop_procedure: Optional[int] = None, R: int = 100, finite_sample: bool = True):
    """Per-draw estimands for a set of posterior draws.

    Super-population values use the closed form (procedure 2) for Gaussian
    outcomes and simulation (procedure 3) for binary ones unless
    ``superpop_procedure`` says otherwise. Finite-sample values (procedure 1)
    impute each draw's missing potential outcomes. Returns a list of
    :class:`PosteriorEstimands`.
    """
    proc = superpop_procedure or (3 if config.binary else 2)
    if proc == 2 and config.binary:
        raise ConfigError("procedure 2 is not available for binary outcomes")
    sp, fp = [], []
    for i in range(len(draws)):
        theta = draws.theta(i)
        S = draws.S[i].astype(np.intp)
        if proc == 2:
            sp.append(closed_form_superpop(theta, data, config, S=S))
        else:
            sp.append(montecarlo_superpop(theta, data, config, R, rng, S=S))
        if finite_sample:
            fp.append(finite_sample_estimands(impute_Y_mis(theta, draws.latent(i), data, config, rng)))
    out = [PosteriorEstimands.from_draws("super-population", proc, sp, config.K)]
    if finite_sample:
        out.append(PosteriorEstimands.from_draws("finite-sample", 1, fp, config.K))
    return out


# -- report ------------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimandRow:
    name: str
    population: str
    procedure: int
    treatment: Optional[float]
    control: Optional[float]
    summary: PosteriorSummary


_CSV_HEADER = [
    "estimand",
    "population",
    "procedure",
    "treatment_mean",
    "control_mean",
    "mean",
    "sd",
    "central_lower",
    "central_upper",
    "hdi_lower",
    "hdi_upper",
    "n_draws",
    "n_undefined",
]


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


@dataclass
class EstimandReport:
    """Summaries of every estimand and contrast for each population computed."""

    rows: list
    warnings: list = field(default_factory=list)

    def row(self, name, population="super-population") -> EstimandRow:
        for r in self.rows:
            if r.name == name and r.population == population:
                return r
        raise KeyError((name, population))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_CSV_HEADER)
            for r in self.rows:
                s = r.summary
                w.writerow(
                    [r.name, r.population, r.procedure, _fmt(r.treatment), _fmt(r.control), _fmt(s.mean), _fmt(s.sd)]
                    + [_fmt(v) for v in (*s.central, *s.hdi)]
                    + [s.n_draws, s.n_undefined]
                )

    def to_text(self) -> str:
        """Fixed-width table with treatment, control, difference and 95% HDI columns."""
        lines = []
        for pop in dict.fromkeys(r.population for r in self.rows):
            rows = [r for r in self.rows if r.population == pop]
            lines.append(f"{pop} estimands (procedure {rows[0].procedure})")
            lines.append(f"{'Estimand':<16}{'Treatment':>11}{'Control':>11}{'Difference':>12}  {'95% HDI':<20}")
            for r in rows:
                s = r.summary
                t = _fmt(r.treatment) or "-"
                c = _fmt(r.control) or "-"
                interval = f"({s.hdi[0]:.2f}, {s.hdi[1]:.2f})"
                lines.append(f"{r.name:<16}{t:>11}{c:>11}{s.mean:>12.3f}  {interval:<20}")
            lines.append("")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines).rstrip() + "\n"


def build_report(estimands, prob: float = 0.95) -> EstimandReport:
    """Summarize each :class:`PosteriorEstimands` into one report."""
    rows, notes = [], []
    for pe in estimands:
        for name, vals in pe.effect.items():
            defined = np.count_nonzero(~np.isnan(vals))
            if defined < 2:
                notes.append(f"{pe.population} {name}: defined at {defined} draws, not summarized")
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                summary = summarize_posterior(vals, prob)
            if summary.warning:
                notes.append(f"{pe.population} {name}: {summary.warning}")
            if summary.n_undefined:
                notes.append(f"{pe.population} {name}: undefined at {summary.n_undefined} draws")
            t = pe.treatment.get(name)
            c = pe.control.get(name)
            rows.append(
                EstimandRow(
                    name=name,
                    population=pe.population,
                    procedure=pe.procedure,
                    treatment=None if t is None else float(np.nanmean(t)),
                    control=None if c is None else float(np.nanmean(c)),
                    summary=summary,
                )
            )
    return EstimandReport(rows, list(dict.fromkeys(notes)))
