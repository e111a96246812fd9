"""Bayesian mixtures of EASI demand systems with censored expenditure shares,
endogenous prices, posterior analytics and policy counterfactuals."""

from .model import (
    Dimensions,
    EasiCoefficients,
    FullCoefficients,
    Observation,
    Dataset,
    DesignPair,
    implicit_utility,
    latent_to_observed,
    build_designs,
    pack,
    unpack,
    complete_system,
    check_regularity,
    weighted_gram,
    solve_shares,
)

__version__ = "0.1.0"
