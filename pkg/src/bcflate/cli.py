"""Command-line front end: ``bcflate {simulate,fit,summarize,report}``.

Settings come from built-in defaults, then an optional INI file (``--config``),
then command-line flags.  Exit codes: 0 success, 2 usage or validation error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import CATEGORICAL, CONTINUOUS, MAX_LEVELS, CovariateSpec, DataError, SchemaSpec, load_csv
from .estimands import late_draws, late_report
from .priors import default_hyper, override_hyper
from .sampler import ChainConfig, PosteriorDraws, run_chains, split_rhat
from .simbench import METHODS, DgpSpec, generate, reference_for, run_replications
from .summarize import fit_the_fit, subgroup_posterior

log = logging.getLogger("bcflate")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
DRAWS_FILE = "draws.bcfl"


class UsageError(Exception):
    pass


# config keys by INI section
SECTIONS = {
    "run": ("seed", "threads", "out"),
    "chain": ("iters", "burn", "chains", "thin"),
    "study": ("study", "n", "p", "support", "reps", "methods", "alpha", "points", "emit_dataset"),
    "data": ("data", "assignment", "receipt", "outcome", "covariates", "categorical", "missing_covariates"),
    "summarize": ("fit_dir", "depth", "min_leaf_frac", "level"),
    "report": ("metrics",),
}

COMMAND_SECTIONS = {
    "simulate": ("run", "chain", "study"),
    "fit": ("run", "chain", "data"),
    "summarize": ("run", "data", "summarize"),
    "report": ("run", "report"),
}


@dataclass
class RunConfig:
    command: str = "fit"
    seed: int = 0
    threads: int | None = None  # None = all available cores
    out: str = "bcflate_out"
    iters: int = 1250
    burn: int | None = None  # None = half of iters
    chains: int = 4
    thin: int = 1
    study: str = "study1_constant"
    n: int = 2000
    p: int | None = None
    support: str | None = None
    reps: int = 20
    methods: str = "bcf_late"
    alpha: float = 0.05
    points: bool = True
    emit_dataset: bool = False
    data: str | None = None
    assignment: str = "a"
    receipt: str = "r"
    outcome: str = "y"
    covariates: str | None = None  # comma list; None = every other column
    categorical: str = ""
    missing_covariates: str = "level"
    hyper: dict = field(default_factory=dict)
    fit_dir: str | None = None
    depth: int = 3
    min_leaf_frac: float = 0.05
    level: float = 0.90
    metrics: str = ""

    def chain_config(self) -> ChainConfig:
        burn = self.iters // 2 if self.burn is None else self.burn
        try:
            return ChainConfig(self.iters, burn, self.chains, self.seed, self.thin)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    @property
    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def recorded(self) -> dict:
        """Settings written next to outputs; worker count and output path are left out
        so reruns elsewhere or with other thread counts give identical files."""
        d = asdict(self)
        for key in ("threads", "out", "fit_dir"):
            d.pop(key)
        return d


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    kind = _TYPES[key]
    if value is None or value == "":
        return None if "None" in kind else value
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    if kind.startswith("bool"):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    return value


def read_config(path) -> dict:
    """Parse an INI file, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    out, hyper = {}, {}
    for sec in cp.sections():
        if sec == "hyper":
            for key, val in cp.items(sec):
                hyper[key] = float(val)
            continue
        if sec not in SECTIONS:
            raise UsageError(f"unknown config section [{sec}]; valid: {', '.join(sorted(SECTIONS))}, hyper")
        for key, val in cp.items(sec):
            if key not in SECTIONS[sec]:
                raise UsageError(f"unknown key {key!r} in [{sec}]")
            try:
                out[key] = _coerce(key, val)
            except ValueError:
                raise UsageError(f"bad value for {key}: {val!r}") from None
    if hyper:
        out["hyper"] = hyper
    return out


def write_config(path, cfg: RunConfig) -> None:
    cp = configparser.ConfigParser()
    rec = cfg.recorded()
    for sec in COMMAND_SECTIONS[cfg.command]:
        keys = SECTIONS[sec]
        vals = {k: rec[k] for k in keys if k in rec and rec[k] not in (None, "")}
        if vals:
            cp[sec] = {k: str(v) for k, v in vals.items()}
    if cfg.hyper and cfg.command == "fit":
        cp["hyper"] = {k: str(v) for k, v in cfg.hyper.items()}
    with open(path, "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# argument parsing


def _chain_flags(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--iters", type=int, help="iterations per chain (default 1250)")
    g.add_argument("--burn", type=int, help="burn-in per chain (default iters/2)")
    g.add_argument("--chains", type=int, help="number of chains (default 4)")
    g.add_argument("--thin", type=int, help="keep every k-th draw (default 1)")


def _data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="input CSV with a header row")
    g.add_argument("--assignment", help="randomized assignment column (default a)")
    g.add_argument("--receipt", help="treatment receipt column (default r)")
    g.add_argument("--outcome", help="binary outcome column (default y)")
    g.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    g.add_argument("--categorical", help="comma-separated unordered categorical covariates")
    g.add_argument("--missing-covariates", choices=("error", "level", "drop"),
                   help="empty covariate cells: error, extra level (default) or drop row")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with default settings")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--out", help="output directory (default bcflate_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bcflate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="run a synthetic replication study")
    sim.add_argument("--study", help="study name (default study1_constant)")
    sim.add_argument("--n", type=int, help="subjects per replication (default 2000)")
    sim.add_argument("--p", type=int, help="number of covariates (study default)")
    sim.add_argument("--support", choices=("unit", "symmetric"),
                     help="covariate cube [0,1]^p or [-1,1]^p (study default)")
    sim.add_argument("--reps", type=int, help="replications (default 20)")
    sim.add_argument("--methods", help=f"comma list from {', '.join(METHODS)} (default bcf_late)")
    sim.add_argument("--alpha", type=float, help="interval miscoverage level (default 0.05)")
    sim.add_argument("--no-points", dest="points", action="store_const", const=False,
                     help="skip the per-subject estimate CSV")
    sim.add_argument("--emit-dataset", action="store_const", const=True,
                     help="also write replication 0 as a CSV ready for `fit`")
    _chain_flags(sim)

    fit = sub.add_parser("fit", parents=[common], help="fit the model to a CSV file")
    _data_flags(fit)
    _chain_flags(fit)
    fit.add_argument("--hyper", action="append", metavar="ENSEMBLE.PARAM=VALUE",
                     help="override a hyperparameter, e.g. tau.sigma=0.3 (repeatable)")

    summ = sub.add_parser("summarize", parents=[common], help="summary tree and subgroup intervals")
    summ.add_argument("--fit-dir", help="directory written by `fit` (default: --out)")
    summ.add_argument("--data", help="dataset CSV (default: the one recorded by `fit`)")
    summ.add_argument("--depth", type=int, help="summary tree depth (default 3)")
    summ.add_argument("--min-leaf-frac", type=float, help="smallest subgroup fraction (default 0.05)")
    summ.add_argument("--level", type=float, help="subgroup interval level (default 0.90)")

    rep = sub.add_parser("report", parents=[common], help="tabulate study results against published values")
    rep.add_argument("metrics", nargs="*", help="metrics.json files written by `simulate`")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    vals = read_config(args.config) if getattr(args, "config", None) else {}
    for key in _TYPES:
        v = getattr(args, key, None)
        if key in ("hyper", "command"):
            continue
        if key == "metrics" and isinstance(v, list):
            v = ",".join(v) if v else None
        if v is not None:
            vals[key] = v
    hyper = dict(vals.pop("hyper", {}))
    for item in getattr(args, "hyper", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--hyper expects ENSEMBLE.PARAM=VALUE, got {item!r}")
        try:
            hyper[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"bad --hyper value {item!r}") from None
    return RunConfig(command=args.command, hyper=hyper, **vals)


# ---------------------------------------------------------------------------
# commands


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    try:
        spec = DgpSpec(cfg.study, cfg.n, cfg.p, cfg.seed, cfg.support)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    methods = tuple(m.strip() for m in cfg.methods.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; valid: {', '.join(METHODS)}")
    if cfg.reps < 1:
        raise UsageError("--reps must be at least 1")
    out = _outdir(cfg)
    chain = cfg.chain_config()
    report = run_replications(spec, methods, cfg.reps, chain, threads=cfg.workers, alpha=cfg.alpha,
                              keep_points=cfg.points)
    report.write_json(out / "metrics.json")
    report.write_records_csv(out / "replications.csv")
    if cfg.points:
        report.write_points_csv(out / "points.csv")
    if cfg.emit_dataset:
        _emit_dataset(spec, out)
    write_config(out / f"{cfg.command}.ini", cfg)
    print(format_report([report.to_dict()]))
    return EXIT_RUNTIME if len(report.failures) == len(methods) * cfg.reps else EXIT_OK


def _emit_dataset(spec: DgpSpec, out: Path) -> None:
    ds, truth = generate(spec, 0)
    with open(out / "dataset.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ds.names + ["a", "r", "y"])
        for i in range(ds.n):
            w.writerow([f"{v:.9g}" for v in ds.raw[i]] + [int(ds.a[i]), int(ds.r[i]), int(ds.y[i])])
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "eta", "mu", "mu_c", "tau", "late"])
        for i, row in enumerate(zip(truth.eta, truth.mu, truth.mu_c, truth.tau, truth.late)):
            w.writerow([i] + [f"{v:.9g}" for v in row])


def infer_schema(cfg: RunConfig) -> SchemaSpec:
    """Column roles from the config; covariate kinds inferred from the values.

    Declared categoricals and any column with non-numeric cells become
    unordered categoricals (levels = sorted distinct values).  A numeric column
    with empty cells becomes categorical too when the missing policy is
    ``level`` and it has few distinct values, so missingness is its own level.
    """
    if not cfg.data:
        raise UsageError("--data is required")
    path = Path(cfg.data)
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    roles = [cfg.assignment, cfg.receipt, cfg.outcome]
    missing = [c for c in roles if c not in header]
    if missing:
        raise UsageError(f"columns missing from {path.name}: {', '.join(missing)}")
    if cfg.covariates:
        names = [c.strip() for c in cfg.covariates.split(",") if c.strip()]
    else:
        names = [c for c in header if c not in roles]
    unknown = [c for c in names if c not in header]
    if unknown:
        raise UsageError(f"covariate columns not in {path.name}: {', '.join(unknown)}")
    declared = {c.strip() for c in cfg.categorical.split(",") if c.strip()}
    covs = []
    for nm in names:
        cells = [(r[nm] or "").strip() for r in rows]
        present = sorted({c for c in cells if c})
        numeric = all(_is_number(c) for c in present)
        has_gap = "" in cells
        as_cat = (nm in declared or not numeric
                  or (has_gap and cfg.missing_covariates == "level" and len(present) < MAX_LEVELS))
        if as_cat:
            if numeric:
                present = sorted(present, key=float)
            covs.append(CovariateSpec(nm, CATEGORICAL, tuple(present) if len(present) > 1 else (*present, "<other>")))
        else:
            covs.append(CovariateSpec(nm, CONTINUOUS))
    return SchemaSpec(cfg.assignment, cfg.receipt, cfg.outcome, tuple(covs), cfg.missing_covariates)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def cmd_fit(cfg: RunConfig) -> int:
    schema = infer_schema(cfg)
    ds = load_csv(cfg.data, schema)
    chain = cfg.chain_config()
    try:
        hyper = override_hyper(default_hyper(ds), cfg.hyper)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(cfg)
    log.info("fitting n=%d p=%d with %d chains x %d iterations", ds.n, ds.p, chain.n_chains, chain.n_iter)
    draws = run_chains(ds, chain, hyper=hyper, threads=cfg.workers)
    draws.save(out / DRAWS_FILE)
    late = late_draws(draws)
    late_report(late, out / "late_summary.csv")
    rhat = split_rhat(draws.fields["late"])
    diag = {
        "n_draws": draws.n_draws,
        "split_rhat_late": _rhat_summary(rhat),
        "chains": draws.meta["chains"],
    }
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(diag, fh, indent=2)
    with open(out / "rhat.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "split_rhat_late"])
        for j, v in enumerate(rhat):
            w.writerow([j, f"{v:.9g}"])
    ds.save_scale_params(out / "scale_params.json")
    meta = {"data": str(Path(cfg.data).resolve()), "n": ds.n, "p": ds.p,
            "schema": {"assignment": schema.assignment, "receipt": schema.receipt, "outcome": schema.outcome,
                       "missing_covariates": schema.missing_covariates,
                       "covariates": [asdict(c) for c in schema.covariates]},
            "hyper": {k: asdict(v) for k, v in hyper.items()}}
    with open(out / "fit.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    write_config(out / f"{cfg.command}.ini", cfg)
    worst = diag["split_rhat_late"]["max"]
    worst = "n/a" if worst is None else f"{worst:.3f}"
    print(f"n={ds.n} draws={draws.n_draws} mean LATE={late.mean():.4f} max split-Rhat={worst}")
    return EXIT_OK


def _rhat_summary(rhat: np.ndarray) -> dict:
    # too few draws per half-chain leaves every value NaN
    ok = rhat[np.isfinite(rhat)]
    if ok.size == 0:
        return {"max": None, "median": None, "frac_above_1.1": None}
    return {"max": float(ok.max()), "median": float(np.median(ok)), "frac_above_1.1": float(np.mean(ok > 1.1))}


def cmd_summarize(cfg: RunConfig) -> int:
    fit_dir = Path(cfg.fit_dir or cfg.out)
    meta_path = fit_dir / "fit.json"
    if not meta_path.exists() or not (fit_dir / DRAWS_FILE).exists():
        raise UsageError(f"{fit_dir} does not hold a fit (need fit.json and {DRAWS_FILE})")
    meta = json.loads(meta_path.read_text())
    sch = meta["schema"]
    schema = SchemaSpec(sch["assignment"], sch["receipt"], sch["outcome"],
                        tuple(CovariateSpec(c["name"], c["kind"], tuple(c["levels"]) if c["levels"] else None)
                              for c in sch["covariates"]),
                        sch["missing_covariates"])
    ds = load_csv(cfg.data or meta["data"], schema)
    draws = PosteriorDraws.load(fit_dir / DRAWS_FILE)
    if draws.n_points != ds.n:
        raise UsageError(f"draw file covers {draws.n_points} subjects but the dataset has {ds.n}")
    late = late_draws(draws)
    try:
        tree = fit_the_fit(late.mean(axis=0), ds, cfg.depth, cfg.min_leaf_frac)
        sub = subgroup_posterior(tree, late, cfg.level)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(cfg)
    tree.to_json(out / "summary_tree.json")
    tree.to_graphviz(out / "summary_tree.dot")
    sub.write_csv(out / "subgroups.csv")
    print(tree.to_graphviz(), end="")
    return EXIT_OK


def format_report(reports: list[dict]) -> str:
    lines = []
    for rep in reports:
        spec = rep["spec"]
        lines.append(f"## {spec['name']} n={spec['n']} p={spec['p']} covariates={spec.get('support')}")
        lines.append("| method | source | RMSE | coverage | width | IS (raw) | IS (scaled) | reps |")
        lines.append("|---|---|---|---|---|---|---|---|")

        def fmt(v):
            return "" if v is None else f"{v:.3f}"

        for m, agg in rep["aggregate"].items():
            lines.append(f"| {m} | this run | {fmt(agg['rmse'])} | {fmt(agg['coverage'])} | {fmt(agg['width'])} "
                         f"| {fmt(agg['interval_score'])} | {fmt(agg['interval_score_scaled'])} | {agg['n_reps']} |")
        for m, ref in sorted(rep.get("reference", {}).items()):
            lines.append(f"| {m} | published | {fmt(ref.get('rmse'))} | {fmt(ref.get('coverage'))} "
                         f"| {fmt(ref.get('width'))} |  | {fmt(ref.get('interval_score_scaled'))} | 100 |")
        if rep.get("failures"):
            lines.append(f"\n{len(rep['failures'])} failed fits")
        lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig) -> int:
    paths = [p for p in cfg.metrics.split(",") if p] or [str(Path(cfg.out) / "metrics.json")]
    reports = []
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"metrics file not found: {p}")
        rep = json.loads(Path(p).read_text())
        if not rep.get("reference"):
            spec = rep["spec"]
            rep["reference"] = reference_for(DgpSpec(**spec))
        reports.append(rep)
    text = format_report(reports)
    out = _outdir(cfg)
    (out / "report.md").write_text(text)
    print(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[cfg.command](cfg)
    except (UsageError, DataError) as exc:
        print(f"bcflate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"bcflate: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
