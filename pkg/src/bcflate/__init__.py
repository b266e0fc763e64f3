"""Bayesian causal forests for conditional local average treatment effects.

Binary outcomes, binary randomized assignment and one-sided noncompliance:
controls cannot receive treatment, so subjects are either compliers or
never-takers, and compliance is latent for the control arm.
"""
from .data import CovariateSpec, Dataset, SchemaSpec, load_csv
from .priors import EnsembleHyper, default_hyper
from .sampler import ChainConfig, PosteriorDraws, run_chains
from .trees import TreePrior

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "CovariateSpec", "Dataset", "EnsembleHyper", "PosteriorDraws", "SchemaSpec",
    "TreePrior", "default_hyper", "load_csv", "run_chains",
]
