"""Command-line entry point: ``analyze``, ``simulate``, ``replicate`` and ``diagnose``.

Every run writes ``manifest.json`` into its output directory with the
resolved configuration, its hash, the seed and the package version; running
the recorded command again reproduces the directory byte for byte.
Progress goes to standard error, results only to files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data_model import TrialDataError, load_trial
from .diagnostics import (
    detect_label_switching,
    gelman_rubin,
    posterior_predictive_check,
    raw_strata_trajectories,
    write_pppv_table,
)
from .estimands import build_report, posterior_estimands
from .gibbs import ChainConfig, PosteriorDraws, SamplerError, read_draws, run_chain, write_draws
from .model import ConfigError, ModelConfig, PriorSpec
from .simulation import (
    ESTIMAND_NAMES,
    CaseStudySpec,
    FitSettings,
    ReplicationAborted,
    generate_case_study,
    run_replication_study,
)

log = logging.getLogger("latentps")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COMPUTE = 4

DEFAULT_CHAIN = {
    "n_chains": 3,
    "n_iterations": 6000,
    "burn_in": 1000,
    "thin": 5,
    "init": "kmeans",
    "relabel": "descending",
    "relabel_key": 0,
}
DEFAULT_SUPERPOP = {"procedure": None, "R": 100}
_PRIOR_ARRAYS = ("dirichlet", "mu_s_mean", "mu_s_cov", "iw_scale")


# -- configuration --------------------------------------------------------------------------


def load_config(path) -> dict:
    """Read a YAML configuration file; a missing path gives an empty configuration."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(cfg) - {"model", "priors", "chain", "superpop", "standardize", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section(cfg, name, defaults):
    given = cfg.get(name) or {}
    if not isinstance(given, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return {**defaults, **given}


def resolve_model(cfg) -> ModelConfig:
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    defaults.update(asdict(ModelConfig.analysis()))
    return ModelConfig(**_section(cfg, "model", defaults))


def resolve_priors(cfg, model: ModelConfig, n_compliance: int, n_cluster_cov: int) -> PriorSpec:
    given = dict(cfg.get("priors") or {})
    preset = given.pop("preset", "analysis")
    allowed = {f.name for f in fields(PriorSpec)}
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'priors': {sorted(unknown)}")
    overrides = {k: np.asarray(v, dtype=float) if k in _PRIOR_ARRAYS else float(v) for k, v in given.items()}
    if preset == "analysis":
        return PriorSpec.analysis(model.K, n_compliance, n_cluster_cov, model.outcome_family, **overrides)
    if preset == "simulation":
        return PriorSpec.simulation(model.K, n_compliance + n_cluster_cov, **overrides)
    raise ConfigError("priors.preset must be 'analysis' or 'simulation'")


def _prior_dict(priors: PriorSpec) -> dict:
    return {f.name: np.asarray(getattr(priors, f.name)).tolist() for f in fields(PriorSpec)}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, subcommand, seed, resolved, extra=None):
    manifest = {
        "package": "latentps",
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": resolved,
        "config_hash": _hash(resolved),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _apply_chain_flags(chain: dict, args) -> dict:
    for flag, key in (("chains", "n_chains"), ("iters", "n_iterations"), ("burnin", "burn_in"), ("thin", "thin")):
        value = getattr(args, flag, None)
        if value is not None:
            chain[key] = value
    return chain


# -- analyze ------------------------------------------------------------------------------


def _run_chain_job(job):
    data, model, priors, chain = job
    return run_chain(data, model, priors, chain)


def _run_chains(data, model, priors, chain_cfgs, jobs):
    work = [(data, model, priors, c) for c in chain_cfgs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            return list(pool.map(_run_chain_job, work))
    return [_run_chain_job(w) for w in work]


def _rhat_rows(chains, estimand_chains):
    rows = []
    per_param = [c.scalar_columns() for c in chains]
    n = min(len(c) for c in chains)
    for name in per_param[0]:
        rows.append((name, gelman_rubin(np.stack([p[name][:n] for p in per_param]))))
    for name, per_chain in estimand_chains.items():
        rows.append((name, gelman_rubin(np.stack([v[:n] for v in per_chain]))))
    return rows


def _write_rhat(rows, path):
    with open(path, "w") as fh:
        fh.write("quantity,rhat\n")
        for name, r in rows:
            fh.write(f"{name},{'' if np.isnan(r) else format(r, '.6g')}\n")


def _write_label_switching(report, path):
    with open(path, "w") as fh:
        fh.write("chain,n_draws,n_switched,rate\n")
        for c, sw in enumerate(report.switched):
            n = len(sw)
            fh.write(f"{c},{n},{int(sw.sum())},{(sw.sum() / n if n else 0.0):.6g}\n")


def _diagnose(draws: PosteriorDraws, data, model, superpop, seed, out: Path, relabel_key, descending):
    chains = draws.chains()
    estimand_chains = {}
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1,))))
    for part in chains:
        pe = posterior_estimands(part, data, model, rng, superpop["procedure"], superpop["R"], finite_sample=False)[0]
        for name, vals in pe.effect.items():
            estimand_chains.setdefault(f"{name} (super-population)", []).append(vals)
    rows = _rhat_rows(chains, estimand_chains) if len(chains) >= 2 else []
    _write_rhat(rows, out / "rhat.csv")
    switching = detect_label_switching(raw_strata_trajectories(draws, relabel_key), descending=descending)
    _write_label_switching(switching, out / "label_switching.csv")
    write_pppv_table(posterior_predictive_check(draws, data, model, seed=seed), out / "pppv.csv")
    return rows, switching


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    model = resolve_model(cfg)
    chain = _apply_chain_flags(_section(cfg, "chain", DEFAULT_CHAIN), args)
    superpop = _section(cfg, "superpop", DEFAULT_SUPERPOP)
    standardize = bool(cfg.get("standardize", True))

    data = load_trial(args.clusters, args.individuals, standardize=standardize)
    priors = resolve_priors(cfg, model, data.n_compliance_metrics, data.n_cluster_covariates)
    chain_cfgs = [
        ChainConfig(
            n_iterations=int(chain["n_iterations"]),
            burn_in=int(chain["burn_in"]),
            thin=int(chain["thin"]),
            init=chain["init"],
            seed=seed,
            chain_id=c,
            relabel=chain["relabel"],
            relabel_key=int(chain["relabel_key"]),
        )
        for c in range(int(chain["n_chains"]))
    ]
    resolved = {
        "model": asdict(model),
        "priors": _prior_dict(priors),
        "chain": chain,
        "superpop": superpop,
        "standardize": standardize,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(exist_ok=True)
    shutil.copyfile(args.clusters, out / "data" / "clusters.csv")
    shutil.copyfile(args.individuals, out / "data" / "individuals.csv")

    log.info("running %d chains of %d iterations", len(chain_cfgs), chain["n_iterations"])
    draws = PosteriorDraws.concatenate(_run_chains(data, model, priors, chain_cfgs, args.jobs))
    write_draws(draws, data, out / "draws")

    log.info("computing estimands")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    report = build_report(posterior_estimands(draws, data, model, rng, superpop["procedure"], superpop["R"]))
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text())

    log.info("computing diagnostics")
    _diagnose(draws, data, model, superpop, seed, out, chain["relabel_key"], chain["relabel"] != "ascending")
    _write_manifest(
        out,
        "analyze",
        seed,
        resolved,
        {
            "inputs": {
                "clusters": {"path": "data/clusters.csv", "sha256": _file_hash(args.clusters)},
                "individuals": {"path": "data/individuals.csv", "sha256": _file_hash(args.individuals)},
            },
            "command": ["analyze", "--clusters", "data/clusters.csv", "--individuals", "data/individuals.csv", "--seed", str(seed)],
        },
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    src = Path(args.draws)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except OSError as exc:
        raise ConfigError(f"{src} has no readable manifest.json") from exc
    resolved = manifest["config"]
    model = ModelConfig(**resolved["model"])
    data = load_trial(src / "data" / "clusters.csv", src / "data" / "individuals.csv", standardize=resolved["standardize"])
    draws = read_draws(src / "draws", data)
    seed = int(args.seed if args.seed is not None else manifest["seed"])
    out = Path(args.out) if args.out else src / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    chain = resolved["chain"]
    _diagnose(draws, data, model, resolved["superpop"], seed, out, chain["relabel_key"], chain["relabel"] != "ascending")
    _write_manifest(out, "diagnose", seed, resolved, {"draws_manifest_hash": manifest["config_hash"]})
    return EXIT_OK


# -- simulate / replicate --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    seed = int(args.seed if args.seed is not None else 0)
    spec = CaseStudySpec.for_case(args.case)
    truth = generate_case_study(spec, seed)
    out = Path(args.out)
    truth.write(out)
    _write_manifest(out, "simulate", seed, {"case": args.case, "spec": asdict(spec)}, {"command": ["simulate", "--case", str(args.case), "--seed", str(seed)]})
    return EXIT_OK


def cmd_replicate(args) -> int:
    cfg = load_config(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    chain = _section(cfg, "chain", {"n_iterations": 2000, "burn_in": 1000, "thin": 1})
    chain = _apply_chain_flags(chain, args)
    chain.pop("n_chains", None)
    settings = FitSettings(n_iterations=int(chain["n_iterations"]), burn_in=int(chain["burn_in"]), thin=int(chain["thin"]))
    oc = run_replication_study(args.case, args.reps, settings, parallelism=args.jobs, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oc.to_csv(out / "operating_characteristics.csv")
    resolved = {"case": args.case, "reps": args.reps, "fit": asdict(settings)}
    _write_manifest(out, "replicate", seed, resolved, {"n_failed": oc.n_failed, "estimands": list(ESTIMAND_NAMES)})
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"latentps {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    def chain_flags(sp):
        sp.add_argument("--chains", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--burnin", type=int)
        sp.add_argument("--thin", type=int)

    a = sub.add_parser("analyze", help="fit the model to a trial and report estimands and diagnostics")
    a.add_argument("--clusters", required=True)
    a.add_argument("--individuals", required=True)
    common(a)
    chain_flags(a)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="generate a synthetic trial with its ground truth")
    s.add_argument("--case", type=int, choices=(1, 2, 3, 4), required=True)
    common(s)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replicate", help="operating characteristics over replicated case studies")
    r.add_argument("--case", type=int, choices=(1, 2, 3, 4), required=True)
    r.add_argument("--reps", type=int, required=True)
    common(r)
    chain_flags(r)
    r.set_defaults(func=cmd_replicate)

    d = sub.add_parser("diagnose", help="R-hat, label switching and PPPV tables for an analyze output")
    d.add_argument("--draws", required=True, help="output directory of a previous analyze run")
    common(d, out_required=False)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except TrialDataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (SamplerError, ReplicationAborted, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
