"""Hyperparameter defaults, the Dirichlet sparsity prior and the LATE prior bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.special import ndtri

from .data import Dataset, clamp_rate, observed_rates

LABELS = ("mu", "mu_c", "tau", "eta")
PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EnsembleHyper:
    label: str
    M: int = 50
    beta0: float = 0.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.M < 1:
            raise ValueError("M must be at least 1")

    @property
    def leaf_mean(self) -> float:
        return self.beta0 / self.M

    @property
    def leaf_var(self) -> float:
        return self.sigma ** 2 / self.M


def default_hyper(ds: Dataset, n_trees: int = 50) -> dict[str, EnsembleHyper]:
    """Recommended settings: outcome and compliance sums centred at the observed rates."""
    y_bar, c_bar = observed_rates(ds)
    n_y = int(ds.has_outcome.sum())
    n_t = int((ds.a == 1).sum())
    return {
        "mu": EnsembleHyper("mu", n_trees, float(ndtri(clamp_rate(y_bar, n_y))), 1.5),
        "mu_c": EnsembleHyper("mu_c", n_trees, 0.0, 0.5),
        "tau": EnsembleHyper("tau", n_trees, 0.0, 0.5),
        "eta": EnsembleHyper("eta", n_trees, float(ndtri(clamp_rate(c_bar, n_t))), 1.5),
    }


def override_hyper(hyper: dict[str, EnsembleHyper], overrides: dict) -> dict[str, EnsembleHyper]:
    """Apply ``{"tau.sigma": 0.3, "mu.M": 100, ...}`` style overrides."""
    out = dict(hyper)
    for key, val in overrides.items():
        label, _, attr = key.partition(".")
        if label not in out or attr not in ("M", "beta0", "sigma"):
            raise KeyError(f"unknown hyperparameter {key!r}")
        out[label] = replace(out[label], **{attr: int(val) if attr == "M" else float(val)})
    return out


def late_prior_bound(tau_abs: float) -> float:
    """First-order bound phi(0) * |tau| on |LATE(x)|."""
    if tau_abs < 0:
        raise ValueError("tau_abs must be non-negative")
    return PHI0 * tau_abs


# ---------------------------------------------------------------------------
# sparsity (DART) prior


def xi_from_u(u, p):
    """Map u = xi / (xi + p) back to xi."""
    return p * u / (1.0 - u)


def sample_xi_prior(p: int, rng: np.random.Generator, size=None):
    # Beta(0.5, 1) by inverse CDF: F(u) = sqrt(u)
    u = rng.random(size) ** 2
    return xi_from_u(u, p)


def sample_theta_prior(xi: float, p: int, rng: np.random.Generator, size=None) -> np.ndarray:
    return rng.dirichlet(np.full(p, xi / p), size=size)


@njit(cache=True)
def log_dirichlet_symmetric(logtheta, conc):
    """log Dirichlet(theta | conc, ..., conc) from log-theta."""
    p = logtheta.shape[0]
    out = math.lgamma(conc * p) - p * math.lgamma(conc)
    for j in range(p):
        out += (conc - 1.0) * logtheta[j]
    return out


@njit(cache=True)
def log_gamma_draw(shape, rng):
    """log of a Gamma(shape, 1) draw, stable for very small shapes."""
    if shape >= 1.0:
        return math.log(rng.gamma(shape, 1.0))
    g = rng.gamma(shape + 1.0, 1.0)
    return math.log(g) + math.log(1.0 - rng.random()) / shape


@njit(cache=True)
def draw_logtheta(counts, logtheta, xi, rng):
    """log theta ~ log Dirichlet(xi/p + counts), written into ``logtheta``."""
    p = logtheta.shape[0]
    if p == 1:
        logtheta[0] = 0.0
        return
    conc = xi / p
    top = -np.inf
    for j in range(p):
        logtheta[j] = log_gamma_draw(conc + counts[j], rng)
        if logtheta[j] > top:
            top = logtheta[j]
    s = 0.0
    for j in range(p):
        s += math.exp(logtheta[j] - top)
    lse = top + math.log(s)
    for j in range(p):
        logtheta[j] -= lse


@njit(cache=True)
def update_xi(logtheta, xi, rng):
    """Independence MH for xi with its prior as proposal; returns 1 on acceptance."""
    p = logtheta.shape[0]
    u = rng.random()
    u = u * u
    if u <= 0.0 or u >= 1.0:
        return 0
    prop = p * u / (1.0 - u)
    if p == 1:
        xi[0] = prop
        return 1
    log_a = log_dirichlet_symmetric(logtheta, prop / p) - log_dirichlet_symmetric(logtheta, xi[0] / p)
    if math.log(1.0 - rng.random()) < log_a:
        xi[0] = prop
        return 1
    return 0


@njit(cache=True)
def update_theta_xi(counts, logtheta, xi, rng):
    """Dirichlet-multinomial draw of theta, then the xi update.

    ``xi`` is a length-1 array updated in place; returns 1 if the xi proposal
    was accepted.
    """
    draw_logtheta(counts, logtheta, xi[0], rng)
    return update_xi(logtheta, xi, rng)


def xi_log_posterior(xi, theta) -> np.ndarray:
    """Unnormalised log posterior of xi given theta (for grid checks)."""
    xi = np.asarray(xi, dtype=float)
    p = len(theta)
    logtheta = np.log(theta)
    u = xi / (xi + p)
    # Beta(0.5, 1) density on u, times Jacobian du/dxi = p / (xi + p)^2
    log_prior = -np.log(2.0) - 0.5 * np.log(u) + np.log(p) - 2.0 * np.log(xi + p)
    conc = xi / p
    from scipy.special import gammaln

    log_lik = gammaln(xi) - p * gammaln(conc) + (conc - 1.0) * logtheta.sum()
    return log_prior + log_lik
