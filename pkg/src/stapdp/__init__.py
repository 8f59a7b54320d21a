"""Nonparametric distance-decay exposure effects with Dirichlet-process clustering.

The package fits a semiparametric regression in which each subject's outcome
receives a contribution from every built-environment feature near them, the
contribution decaying smoothly with distance.  Subjects are clustered on the
shape of their decay curve through a truncated Dirichlet-process prior, and
the whole model is sampled by a blocked Gibbs sweep.
"""

from stapdp.basis import SplineBasis, PenaltyDecomposition, build_basis, difference_penalty
from stapdp.data import DataError, Dataset, DistanceSet, SchemaConfig, load_dataset
from stapdp.sampler import (
    ModelState,
    NumericalError,
    PosteriorDraws,
    PriorConfig,
    SamplerConfig,
    run_chain,
)
from stapdp.partition import Partition, assign_mode, binder_loss, coclustering

__version__ = "0.1.0"

__all__ = [
    "SplineBasis",
    "PenaltyDecomposition",
    "build_basis",
    "difference_penalty",
    "DataError",
    "Dataset",
    "DistanceSet",
    "SchemaConfig",
    "load_dataset",
    "ModelState",
    "NumericalError",
    "PosteriorDraws",
    "PriorConfig",
    "SamplerConfig",
    "run_chain",
    "Partition",
    "assign_mode",
    "binder_loss",
    "coclustering",
]
