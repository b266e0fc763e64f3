"""Causal estimands from posterior draws, plus the two ratio-estimator baselines."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import DataError, Dataset, clamp_rate
from .priors import PHI0, EnsembleHyper
from .rng import chain_streams
from .sampler import ChainConfig, PosteriorDraws, run_probit_bart
from .trees import TreePrior

log = logging.getLogger(__name__)

INTERVAL_LEVELS = (0.50, 0.80, 0.95)
QUANTILES = (0.025, 0.05, 0.10, 0.25, 0.75, 0.90, 0.95, 0.975)
DENOM_FLOOR = 1e-3
SE_MULTIPLIERS = (0.65, 1.3, 2.0)


class WeakInstrumentError(DataError):
    """The instrument moves receipt by zero, so the Wald ratio is undefined."""


def probit_contrast(mu, mu_c, tau):
    """Phi(mu + mu_c + tau) - Phi(mu + mu_c), elementwise in double precision."""
    base = np.asarray(mu, dtype=float) + np.asarray(mu_c, dtype=float)
    return ndtr(base + np.asarray(tau, dtype=float)) - ndtr(base)


def equal_tailed(samples, level, axis=0):
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [a, 1.0 - a], axis=axis)
    return lo, hi


@dataclass
class LatePosterior:
    draws: np.ndarray
    tau: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.draws))

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        lo, hi = equal_tailed(self.draws, level)
        return float(lo), float(hi)

    @property
    def intervals(self) -> dict[float, tuple[float, float]]:
        return {lv: self.interval(lv) for lv in INTERVAL_LEVELS}


def late_draws(draws: PosteriorDraws) -> np.ndarray:
    """Per-draw LATE(x), shape (n_draws, n_points), from stored components when present."""
    if all(f in draws.fields for f in ("mu", "mu_c", "tau")):
        return probit_contrast(draws["mu"], draws["mu_c"], draws["tau"])
    return draws["late"].astype(float)


def late_from_draws(draws: PosteriorDraws, point: int) -> LatePosterior:
    if draws.n_draws == 0:
        raise ValueError("no posterior draws")
    if all(f in draws.fields for f in ("mu", "mu_c", "tau")):
        mu, mu_c, tau = (draws[f][:, point].astype(float) for f in ("mu", "mu_c", "tau"))
        return LatePosterior(probit_contrast(mu, mu_c, tau), tau)
    return LatePosterior(draws["late"][:, point].astype(float))


def late_bound_holds(late, tau, rtol: float = 1e-12) -> bool:
    """Check |LATE| <= phi(0) |tau| draw by draw."""
    late, tau = np.asarray(late), np.asarray(tau)
    return bool(np.all(np.abs(late) <= PHI0 * np.abs(tau) * (1 + rtol) + 1e-300))


def summarize_points(samples: np.ndarray, flags=None) -> list[dict]:
    """Per-point posterior mean and quantiles from an (n_draws, n_points) array."""
    means = samples.mean(axis=0)
    qs = np.quantile(samples, QUANTILES, axis=0)
    rows = []
    for j in range(samples.shape[1]):
        row = {"point": j, "mean": float(means[j])}
        for q, v in zip(QUANTILES, qs[:, j]):
            row[f"q{q * 100:g}"] = float(v)
        row["flags"] = "" if flags is None else flags[j]
        rows.append(row)
    return rows


def write_point_summary(path, rows: list[dict]) -> None:
    cols = list(rows[0]) if rows else ["point", "mean", "flags"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in (row[c] for c in cols)])


# ---------------------------------------------------------------------------
# constant Wald estimator


@dataclass(frozen=True)
class WaldEstimate:
    itt_y: float
    itt_r: float
    late: float
    se: float | None = None

    def __post_init__(self):
        if not 0.0 < self.itt_r <= 1.0:
            raise WeakInstrumentError(f"itt_r={self.itt_r} outside (0, 1]")

    def bands(self, multipliers=SE_MULTIPLIERS) -> dict[float, tuple[float, float]]:
        if self.se is None:
            return {}
        return {k: (self.late - k * self.se, self.late + k * self.se) for k in multipliers}

    def to_dict(self) -> dict:
        return {"itt_y": self.itt_y, "itt_r": self.itt_r, "late": self.late, "se": self.se,
                "bands": {f"{k:g}": list(v) for k, v in self.bands().items()}}


def wald_constant(ds: Dataset) -> WaldEstimate:
    """Ratio of the outcome ITT to the receipt ITT, with a delta-method SE.

    Under one-sided noncompliance the receipt ITT is the treated-arm receipt
    rate.  Subjects with a missing outcome are left out of the outcome means.
    """
    t = ds.a == 1
    obs = ds.has_outcome
    t_y, c_y = t & obs, ~t & obs
    if not t_y.any() or not c_y.any():
        raise DataError("both arms need observed outcomes")
    y1, y0 = ds.y[t_y].astype(float), ds.y[c_y].astype(float)
    r1 = ds.r[t].astype(float)
    itt_y = y1.mean() - y0.mean()
    itt_r = r1.mean()
    if itt_r <= 0.0:
        raise WeakInstrumentError("no treated subject received treatment: Wald ratio undefined")
    late = itt_y / itt_r

    n1, n0 = len(y1), len(y0)
    var_y = y1.var(ddof=1) / n1 + y0.var(ddof=1) / n0 if n1 > 1 and n0 > 1 else np.nan
    var_r = r1.var(ddof=1) / len(r1) if len(r1) > 1 else np.nan
    # covariance of the treated-arm outcome and receipt means (subjects with both)
    ry = ds.r[t_y].astype(float)
    cov = np.cov(y1, ry, ddof=1)[0, 1] / len(r1) if n1 > 1 else 0.0
    var = var_y / itt_r ** 2 + itt_y ** 2 * var_r / itt_r ** 4 - 2.0 * itt_y * cov / itt_r ** 3
    se = float(np.sqrt(var)) if np.isfinite(var) and var >= 0 else None
    return WaldEstimate(float(itt_y), float(itt_r), float(late), se)


# ---------------------------------------------------------------------------
# Wald-BART comparator


@dataclass
class WaldBartResult:
    """Per-draw ratio estimates with the numerator/denominator draws they came from."""

    ratio: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray
    clamped: np.ndarray = field(repr=False)
    degenerate_denominator: bool = False

    @property
    def mean(self) -> np.ndarray:
        return self.ratio.mean(axis=0)

    def interval(self, level: float = 0.95):
        return equal_tailed(self.ratio, level)

    @property
    def flags(self) -> list[str]:
        out = []
        for j in range(self.ratio.shape[1]):
            f = []
            if self.clamped[j] > 0:
                f.append(f"weak_instrument:{self.clamped[j]:.4g}")
            if self.degenerate_denominator:
                f.append("degenerate_denominator")
            out.append(";".join(f))
        return out


def _probit_hyper(y) -> EnsembleHyper:
    return EnsembleHyper("f", 50, float(ndtri(clamp_rate(float(np.mean(y)), len(y)))), 1.5)


def _fit_probability(X, y, is_cat, n_levels, cfg, eval_X, method, rep, threads, prior):
    """Posterior draws of P(y = 1 | x) at eval_X, stacked over chains."""
    rngs = chain_streams(cfg.seed, cfg.n_chains, method, rep)
    hyper = _probit_hyper(y)

    def one(c):
        return run_probit_bart(X, y, is_cat, n_levels, cfg, eval_X, rngs[c], hyper, prior)

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chains = list(pool.map(one, range(cfg.n_chains)))
    else:
        chains = [one(c) for c in range(cfg.n_chains)]
    return ndtr(np.concatenate(chains, axis=0).astype(float))


def wald_bart(ds: Dataset, cfg: ChainConfig = ChainConfig(), eval_points=None, learner: str = "t",
              threads: int | None = 1, rep: int = 0, prior: TreePrior = TreePrior()) -> WaldBartResult:
    """Ratio of BART-estimated conditional outcome and receipt ITTs.

    The numerator is P(Y=1 | x, a=1) - P(Y=1 | x, a=0), from separate fits per
    arm (``learner="t"``) or one fit with assignment as a covariate
    (``learner="s"``).  The denominator is P(R=1 | x, a=1).  Draws are paired
    by index; denominators below ``DENOM_FLOOR`` are clamped and flagged.
    """
    if learner not in ("t", "s"):
        raise ValueError("learner must be 't' or 's'")
    eval_X = ds.X if eval_points is None else np.atleast_2d(np.asarray(eval_points, dtype=float))
    is_cat, n_lev = ds.is_cat, ds.n_levels
    obs = ds.has_outcome
    t = ds.a == 1
    if not (t & obs).any() or not (~t & obs).any():
        raise DataError("both arms need observed outcomes")

    if learner == "t":
        p1 = _fit_probability(ds.X[t & obs], ds.y[t & obs], is_cat, n_lev, cfg, eval_X,
                              "wald_bart.y1", rep, threads, prior)
        p0 = _fit_probability(ds.X[~t & obs], ds.y[~t & obs], is_cat, n_lev, cfg, eval_X,
                              "wald_bart.y0", rep, threads, prior)
    else:
        Xa = np.column_stack([ds.X[obs], ds.a[obs].astype(float)])
        cat_a = np.append(is_cat, False)
        lev_a = np.append(n_lev, 0)
        m = eval_X.shape[0]
        both = np.vstack([np.column_stack([eval_X, np.ones(m)]), np.column_stack([eval_X, np.zeros(m)])])
        pp = _fit_probability(Xa, ds.y[obs], cat_a, lev_a, cfg, both, "wald_bart.y", rep, threads, prior)
        p1, p0 = pp[:, :m], pp[:, m:]
    num = p1 - p0

    r_t = ds.r[t]
    degenerate = bool(r_t.min() == r_t.max())
    if degenerate:
        log.warning("treated-arm receipt is constant (%d); denominator fixed at that rate", int(r_t[0]))
        den = np.full_like(num, float(r_t[0]))
    else:
        den = _fit_probability(ds.X[t], r_t, is_cat, n_lev, cfg, eval_X, "wald_bart.r", rep, threads, prior)
    low = den < DENOM_FLOOR
    ratio = num / np.where(low, DENOM_FLOOR, den)
    return WaldBartResult(ratio, num, den, low.mean(axis=0), degenerate)


def late_report(samples: np.ndarray, path_csv=None, path_json=None, flags=None) -> list[dict]:
    rows = summarize_points(samples, flags)
    if path_csv is not None:
        write_point_summary(path_csv, rows)
    if path_json is not None:
        with open(path_json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows
