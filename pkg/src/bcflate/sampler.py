"""Metropolis-within-Gibbs sampler for the joint outcome/compliance tree model.

Each iteration:

1. impute compliance for control subjects given the current fits;
2. draw probit latent utilities for outcome and compliance;
3. update every tree of the mu, mu_c, tau and eta ensembles against weighted
   partial residuals (tree structure by grow/prune MH with jumps integrated
   out, then jumps from their conjugate normal conditional);
4. redraw each ensemble's splitting probabilities and sparsity parameter.

The outcome predictor is ``mu + c * mu_c + c * a * tau`` so the per-subject
weight multiplying a tree's output is 1, ``c`` or ``c * a`` for the three
outcome ensembles; the compliance predictor ``eta`` has weight 1.  Subjects
with a missing outcome get weight 0 in the outcome ensembles.
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import ndtr, ndtri

from ._normal import norm_cdf, norm_cdf_clamped, truncnorm_negative, truncnorm_positive
from .data import Dataset, clamp_rate
from .priors import LABELS, EnsembleHyper, default_hyper, update_theta_xi
from .rng import chain_streams
from .trees import (
    DEFAULT_CAPACITY, MOVE_REJECTED, TreeEnsemble, TreePrior, draw_leaves, mh_step, predict_ensemble,
)

log = logging.getLogger(__name__)

FIELDS = ("mu", "mu_c", "tau", "eta", "late")
MU, MU_C, TAU, ETA = range(4)


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 1250
    n_burn: int = 625
    n_chains: int = 4
    seed: int = 0
    thin: int = 1

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.n_chains < 1 or self.thin < 1:
            raise ValueError("n_chains and thin must be positive")

    @property
    def n_keep(self) -> int:
        return len(range(self.n_burn, self.n_iter, self.thin))

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_keep


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def compliance_prob(f_mu, f_muc, f_eta, y):
    """P(C = 1 | Y = y, fits) for a control subject; y = -1 means missing outcome."""
    pe = norm_cdf_clamped(f_eta)
    if y < 0:
        return pe
    p1 = norm_cdf_clamped(f_mu + f_muc)
    p0 = norm_cdf_clamped(f_mu)
    if y == 1:
        num = pe * p1
        return num / (num + (1.0 - pe) * p0)
    num = pe * (1.0 - p1)
    return num / (num + (1.0 - pe) * (1.0 - p0))


@njit(cache=True, nogil=True)
def impute_compliance_kernel(fits, y, a, c, rng):
    for i in range(y.shape[0]):
        if a[i] == 0:
            q = compliance_prob(fits[MU, i], fits[MU_C, i], fits[ETA, i], y[i])
            c[i] = 1 if rng.random() < q else 0


@njit(cache=True, nogil=True)
def latent_kernel(fits, y, a, c, ytil, ctil, rng):
    for i in range(y.shape[0]):
        if y[i] >= 0:
            f = fits[MU, i] + c[i] * fits[MU_C, i] + c[i] * a[i] * fits[TAU, i]
            ytil[i] = truncnorm_positive(f, rng) if y[i] == 1 else truncnorm_negative(f, rng)
        else:
            ytil[i] = 0.0
        if c[i] == 1:
            ctil[i] = truncnorm_positive(fits[ETA, i], rng)
        else:
            ctil[i] = truncnorm_negative(fits[ETA, i], rng)


@njit(cache=True, nogil=True)
def refresh_residuals(fits, y, a, c, ytil, ctil, w, Ry, Rc):
    """Recompute ensemble weights and full residuals from scratch."""
    for i in range(y.shape[0]):
        hy = 1.0 if y[i] >= 0 else 0.0
        w[MU, i] = hy
        w[MU_C, i] = hy * c[i]
        w[TAU, i] = hy * c[i] * a[i]
        w[ETA, i] = 1.0
        if hy > 0.0:
            Ry[i] = ytil[i] - fits[MU, i] - c[i] * fits[MU_C, i] - c[i] * a[i] * fits[TAU, i]
        else:
            Ry[i] = 0.0
        Rc[i] = ctil[i] - fits[ETA, i]


@njit(cache=True, nogil=True)
def update_tree_kernel(var, cut, mask, left, right, parent, depth, value, leaf_of, X, R, w, fit,
                       logtheta, is_cat, n_levels, alpha, beta, max_depth, m0, s2,
                       r, sww, swr, rng):
    """Backfitting update of one tree; keeps ``R`` (full residual) and ``fit`` current."""
    n = X.shape[0]
    for i in range(n):
        g = value[leaf_of[i]]
        r[i] = R[i] + w[i] * g
        fit[i] -= g
    move = mh_step(var, cut, mask, left, right, parent, depth, value, leaf_of, X, r, w,
                   logtheta, is_cat, n_levels, alpha, beta, max_depth, m0, s2, rng)
    draw_leaves(var, value, leaf_of, r, w, m0, s2, rng, sww, swr)
    for i in range(n):
        g = value[leaf_of[i]]
        R[i] = r[i] - w[i] * g
        fit[i] += g
    return move


@njit(cache=True, nogil=True)
def sweep_kernel(var, cut, mask, left, right, parent, depth, value, leaf_of, n_trees, X, R, w, fit,
                 logtheta, is_cat, n_levels, alpha, beta, max_depth, m0, s2, r, sww, swr, rng):
    accepted = 0
    for m in range(n_trees):
        move = update_tree_kernel(var[m], cut[m], mask[m], left[m], right[m], parent[m], depth[m],
                                  value[m], leaf_of[m], X, R, w, fit, logtheta, is_cat, n_levels,
                                  alpha, beta, max_depth, m0, s2, r, sww, swr, rng)
        if move != MOVE_REJECTED:
            accepted += 1
    return accepted


@njit(cache=True, nogil=True)
def split_counts_kernel(var, n_trees, p):
    counts = np.zeros(p)
    for m in range(n_trees):
        for k in range(var.shape[1]):
            if var[m, k] >= 0:
                counts[var[m, k]] += 1.0
    return counts


@njit(cache=True, nogil=True)
def sparsity_kernel(var, n_trees, logtheta, xi, rng):
    counts = split_counts_kernel(var, n_trees, logtheta.shape[0])
    return update_theta_xi(counts, logtheta, xi, rng)


@njit(cache=True, nogil=True)
def probit_latent_kernel(fit, y, z, rng):
    for i in range(y.shape[0]):
        z[i] = truncnorm_positive(fit[i], rng) if y[i] == 1 else truncnorm_negative(fit[i], rng)


@njit(cache=True, nogil=True)
def late_kernel(f_mu, f_muc, f_tau, out):
    for i in range(f_mu.shape[0]):
        base = f_mu[i] + f_muc[i]
        out[i] = norm_cdf(base + f_tau[i]) - norm_cdf(base)


# ---------------------------------------------------------------------------
# state


class ModelState:
    """Everything one chain carries between iterations."""

    def __init__(self, ds: Dataset, hyper: dict[str, EnsembleHyper] | None = None,
                 prior: TreePrior = TreePrior(), rng: np.random.Generator | None = None,
                 capacity: int = DEFAULT_CAPACITY):
        if hyper is None:
            hyper = default_hyper(ds)
        rng = rng if rng is not None else np.random.default_rng()
        self.hyper = {lab: hyper[lab] for lab in LABELS}
        self.prior = prior
        n, p = ds.n, ds.p
        self.X = np.array(ds.X, dtype=np.float64, order="C")
        self.is_cat = ds.is_cat
        self.n_levels = ds.n_levels
        self.y = np.array(ds.y, dtype=np.int8)
        self.a = np.array(ds.a, dtype=np.int8)
        self.ensembles = {
            lab: TreeEnsemble(h.M, p, h.beta0, h.sigma, capacity=capacity, label=lab)
            for lab, h in self.hyper.items()
        }
        self.leaf_of = {lab: np.zeros((h.M, n), dtype=np.int32) for lab, h in self.hyper.items()}
        self.fits = np.zeros((4, n))
        for e, lab in enumerate(LABELS):
            self.fits[e] = self.hyper[lab].beta0
        treated = self.a == 1
        if treated.any():
            c_bar = clamp_rate(float(ds.r[treated].mean()), int(treated.sum()))
        else:
            c_bar = float(ndtr(self.hyper["eta"].beta0))
        self.c = np.where(treated, ds.r, (rng.random(n) < c_bar)).astype(np.int8)
        self.ytil = np.zeros(n)
        self.ctil = np.zeros(n)
        self.w = np.zeros((4, n))
        self.Ry = np.zeros(n)
        self.Rc = np.zeros(n)
        self._r = np.zeros(n)
        self._sww = np.zeros(capacity)
        self._swr = np.zeros(capacity)
        self.accepts = np.zeros(4, dtype=np.int64)
        self.iteration = 0
        latent_kernel(self.fits, self.y, self.a, self.c, self.ytil, self.ctil, rng)
        self.refresh()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def refresh(self) -> None:
        refresh_residuals(self.fits, self.y, self.a, self.c, self.ytil, self.ctil, self.w, self.Ry, self.Rc)

    def fit_of(self, label: str) -> np.ndarray:
        return self.fits[LABELS.index(label)]

    def residual_for(self, label: str) -> np.ndarray:
        return self.Rc if label == "eta" else self.Ry

    def weights_for(self, label: str) -> np.ndarray:
        return self.w[LABELS.index(label)]

    def audit(self, atol: float = 1e-10) -> float:
        """Max deviation of cached fits/residuals from a full recomputation."""
        worst = 0.0
        for e, lab in enumerate(LABELS):
            full = self.ensembles[lab].predict(self.X) if self.n else np.zeros(0)
            if self.n:
                worst = max(worst, float(np.max(np.abs(full - self.fits[e]))))
        if self.n:
            has_y = self.y >= 0
            f = self.fits[MU] + self.c * self.fits[MU_C] + self.c * self.a * self.fits[TAU]
            ry = np.where(has_y, self.ytil - f, 0.0)
            worst = max(worst, float(np.max(np.abs(ry - self.Ry))))
            worst = max(worst, float(np.max(np.abs(self.ctil - self.fits[ETA] - self.Rc))))
        if worst > atol:
            raise AssertionError(f"cache audit failed: max deviation {worst:.3e}")
        return worst


def impute_compliance(state: ModelState, rng: np.random.Generator) -> np.ndarray:
    impute_compliance_kernel(state.fits, state.y, state.a, state.c, rng)
    return state.c


def draw_latent_utilities(state: ModelState, rng: np.random.Generator) -> None:
    latent_kernel(state.fits, state.y, state.a, state.c, state.ytil, state.ctil, rng)
    state.refresh()


def update_tree(label: str, m: int, state: ModelState, rng: np.random.Generator) -> int:
    """Update tree ``m`` of one ensemble; returns the MH move code (0 = rejected)."""
    e = LABELS.index(label)
    ens = state.ensembles[label]
    pr = state.prior
    return update_tree_kernel(
        ens.var[m], ens.cut[m], ens.mask[m], ens.left[m], ens.right[m], ens.parent[m], ens.depth[m],
        ens.value[m], state.leaf_of[label][m], state.X, state.residual_for(label), state.w[e],
        state.fits[e], ens.logtheta, state.is_cat, state.n_levels, pr.alpha, pr.beta, pr.max_depth,
        ens.leaf_mean, ens.leaf_var, state._r, state._sww, state._swr, rng)


def sweep_ensemble(label: str, state: ModelState, rng: np.random.Generator) -> int:
    e = LABELS.index(label)
    ens = state.ensembles[label]
    pr = state.prior
    return sweep_kernel(
        ens.var, ens.cut, ens.mask, ens.left, ens.right, ens.parent, ens.depth, ens.value,
        state.leaf_of[label], ens.n_trees, state.X, state.residual_for(label), state.w[e],
        state.fits[e], ens.logtheta, state.is_cat, state.n_levels, pr.alpha, pr.beta, pr.max_depth,
        ens.leaf_mean, ens.leaf_var, state._r, state._sww, state._swr, rng)


def update_sparsity(label: str, state: ModelState, rng: np.random.Generator) -> int:
    ens = state.ensembles[label]
    return sparsity_kernel(ens.var, ens.n_trees, ens.logtheta, ens.xi, rng)


def gibbs_iteration(state: ModelState, rng: np.random.Generator, debug: bool = False) -> ModelState:
    impute_compliance(state, rng)
    draw_latent_utilities(state, rng)
    for e, lab in enumerate(LABELS):
        state.accepts[e] += sweep_ensemble(lab, state, rng)
    for lab in LABELS:
        update_sparsity(lab, state, rng)
    state.iteration += 1
    if debug:
        state.audit()
    return state


# ---------------------------------------------------------------------------
# draws


@dataclass
class PosteriorDraws:
    """Kept draws, each field shaped (n_chains, n_keep, n_points)."""

    fields: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def _shape(self):
        return next(iter(self.fields.values())).shape

    @property
    def n_chains(self) -> int:
        return self._shape()[0]

    @property
    def n_per_chain(self) -> int:
        return self._shape()[1]

    @property
    def n_points(self) -> int:
        return self._shape()[2]

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_per_chain

    def __getitem__(self, name: str) -> np.ndarray:
        """Draws of one field flattened over chains: (n_draws, n_points)."""
        arr = self.fields[name]
        return arr.reshape(-1, arr.shape[2])

    def save(self, path) -> None:
        write_draws(path, self)

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        return read_draws(path)

    def to_csv(self, path) -> None:
        names = list(self.fields)
        with open(path, "w") as fh:
            fh.write("chain,draw,point," + ",".join(names) + "\n")
            arrs = [self.fields[nm] for nm in names]
            for c in range(self.n_chains):
                for d in range(self.n_per_chain):
                    for j in range(self.n_points):
                        vals = ",".join(f"{float(a[c, d, j]):.9g}" for a in arrs)
                        fh.write(f"{c},{d},{j},{vals}\n")


MAGIC = b"BCFL1"


def write_draws(path, draws: PosteriorDraws) -> None:
    """Columnar little-endian draw file.

    Layout: magic ``BCFL1``; uint32 n_chains, n_per_chain, n_points, n_fields;
    per field a uint16 name length and UTF-8 name; then each field's float32
    block in (chain, draw, point) C order, fields in header order.
    """
    names = list(draws.fields)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", draws.n_chains, draws.n_per_chain, draws.n_points, len(names)))
        for nm in names:
            b = nm.encode("utf-8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
        for nm in names:
            fh.write(np.ascontiguousarray(draws.fields[nm], dtype="<f4").tobytes())


def read_draws(path) -> PosteriorDraws:
    with open(path, "rb") as fh:
        if fh.read(5) != MAGIC:
            raise ValueError(f"{path} is not a draw file")
        n_chains, n_per, n_points, n_fields = struct.unpack("<IIII", fh.read(16))
        names = []
        for _ in range(n_fields):
            (ln,) = struct.unpack("<H", fh.read(2))
            names.append(fh.read(ln).decode("utf-8"))
        size = n_chains * n_per * n_points
        out = {}
        for nm in names:
            buf = fh.read(4 * size)
            if len(buf) != 4 * size:
                raise ValueError(f"{path}: truncated field {nm!r}")
            out[nm] = np.frombuffer(buf, dtype="<f4").reshape(n_chains, n_per, n_points).astype(np.float32)
    return PosteriorDraws(out)


def split_rhat(x: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction; ``x`` is (n_chains, n_draws, ...)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1] // 2
    if n < 2:
        return np.full(x.shape[2:], np.nan)
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sqrt(var_plus / w)
    return np.where(w > 0, r, 1.0)


# ---------------------------------------------------------------------------
# chains


def _record(state: ModelState, eval_X, fields, buf) -> dict:
    if eval_X is None:
        vals = {lab: state.fits[e] for e, lab in enumerate(LABELS)}
    else:
        vals = {lab: state.ensembles[lab].predict(eval_X) for lab in LABELS
                if lab in fields or ("late" in fields and lab != "eta")}
    out = {}
    for f in fields:
        if f == "late":
            late_kernel(vals["mu"], vals["mu_c"], vals["tau"], buf)
            out[f] = buf
        else:
            out[f] = vals[f]
    return out


def run_chain(ds: Dataset, cfg: ChainConfig, hyper, prior: TreePrior, rng: np.random.Generator,
              eval_X=None, fields=FIELDS, capacity: int = DEFAULT_CAPACITY, debug: bool = False):
    state = ModelState(ds, hyper, prior, rng, capacity)
    n_points = ds.n if eval_X is None else eval_X.shape[0]
    out = {f: np.empty((cfg.n_keep, n_points), dtype=np.float32) for f in fields}
    buf = np.empty(n_points)
    k = 0
    for it in range(cfg.n_iter):
        gibbs_iteration(state, rng, debug=debug)
        if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
            for f, v in _record(state, eval_X, fields, buf).items():
                out[f][k] = v
            k += 1
    rates = state.accepts / (cfg.n_iter * np.array([h.M for h in state.hyper.values()]))
    return out, {"accept_rate": dict(zip(LABELS, rates.round(4).tolist()))}


def run_chains(ds: Dataset, cfg: ChainConfig = ChainConfig(), eval_points=None,
               hyper: dict[str, EnsembleHyper] | None = None, prior: TreePrior = TreePrior(),
               fields=FIELDS, threads: int | None = 1, rep: int = 0, method: str = "bcf_late",
               capacity: int = DEFAULT_CAPACITY, debug: bool = False) -> PosteriorDraws:
    """Run independent chains and collect post-burn-in draws.

    ``eval_points`` are model-scale covariate rows (``None`` = the training
    subjects).  Output is identical for any ``threads`` value.
    """
    if hyper is None:
        hyper = default_hyper(ds)
    eval_X = None if eval_points is None else np.ascontiguousarray(np.atleast_2d(eval_points), dtype=np.float64)
    fields = tuple(fields)
    unknown = set(fields) - set(FIELDS)
    if unknown:
        raise ValueError(f"unknown draw fields {sorted(unknown)}")
    rngs = chain_streams(cfg.seed, cfg.n_chains, method, rep)

    def one(c):
        return run_chain(ds, cfg, hyper, prior, rngs[c], eval_X, fields, capacity, debug)

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(cfg.n_chains)))
    else:
        results = [one(c) for c in range(cfg.n_chains)]
    stacked = {f: np.stack([res[0][f] for res in results]) for f in fields}
    meta = {"chains": [res[1] for res in results], "seed": cfg.seed, "n_iter": cfg.n_iter,
            "n_burn": cfg.n_burn, "thin": cfg.thin}
    return PosteriorDraws(stacked, meta)


# ---------------------------------------------------------------------------
# plain probit BART (used by the Wald-ratio comparator)


def run_probit_bart(X, y, cov_is_cat, cov_n_levels, cfg: ChainConfig, eval_X, rng: np.random.Generator,
                    hyper: EnsembleHyper | None = None, prior: TreePrior = TreePrior(),
                    capacity: int = DEFAULT_CAPACITY) -> np.ndarray:
    """One chain of a single-ensemble probit BART; returns (n_keep, n_eval) fitted probits."""
    X = np.array(X, dtype=np.float64, order="C")
    y = np.array(y, dtype=np.int8)
    eval_X = np.array(eval_X, dtype=np.float64, order="C")
    n, p = X.shape
    if hyper is None:
        hyper = EnsembleHyper("f", 50, float(ndtri(clamp_rate(float(y.mean()), n))), 1.5)
    ens = TreeEnsemble(hyper.M, p, hyper.beta0, hyper.sigma, capacity=capacity)
    leaf_of = np.zeros((hyper.M, n), dtype=np.int32)
    fit = np.full(n, hyper.beta0)
    z = np.zeros(n)
    R = np.zeros(n)
    w = np.ones(n)
    r = np.zeros(n)
    sww = np.zeros(capacity)
    swr = np.zeros(capacity)
    out = np.empty((cfg.n_keep, eval_X.shape[0]), dtype=np.float32)
    buf = np.empty(eval_X.shape[0])
    k = 0
    for it in range(cfg.n_iter):
        probit_latent_kernel(fit, y, z, rng)
        np.subtract(z, fit, out=R)
        sweep_kernel(ens.var, ens.cut, ens.mask, ens.left, ens.right, ens.parent, ens.depth, ens.value,
                     leaf_of, ens.n_trees, X, R, w, fit, ens.logtheta, cov_is_cat, cov_n_levels,
                     prior.alpha, prior.beta, prior.max_depth, ens.leaf_mean, ens.leaf_var,
                     r, sww, swr, rng)
        sparsity_kernel(ens.var, ens.n_trees, ens.logtheta, ens.xi, rng)
        if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
            predict_ensemble(ens.var, ens.cut, ens.mask, ens.left, ens.right, ens.value,
                             ens.n_trees, eval_X, buf)
            out[k] = buf
            k += 1
    return out
