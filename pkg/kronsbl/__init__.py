"""Sparse Bayesian learning estimators for Kronecker-structured linear models."""

from kronsbl.estimators import (
    ESTIMATORS,
    ConvergencePolicy,
    ESblHyper,
    EstimateReport,
    SblHyper,
    run_esbl,
    run_least_squares,
    run_mesbl,
    run_sbl,
)
from kronsbl.numerics import DictionaryKron, GramStructure

__all__ = [
    "ESTIMATORS",
    "ConvergencePolicy",
    "DictionaryKron",
    "ESblHyper",
    "EstimateReport",
    "GramStructure",
    "SblHyper",
    "run_esbl",
    "run_least_squares",
    "run_mesbl",
    "run_sbl",
]
