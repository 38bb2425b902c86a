"""Approximate Bayesian computation with summary-statistic reduction."""

from .core import (ABCError, DegenerateDistancesError, EmptyAcceptanceError, KernelSpec,
                   Observation, ReferenceTable, StandardisationSpec, WeightedSample,
                   calibrate_epsilon, compute_scales, distances, kernel_weights)
from .sampler import SimulatorSpec, generate_table, rejection_abc

__version__ = "0.1.0"

__all__ = [
    "ABCError", "DegenerateDistancesError", "EmptyAcceptanceError", "KernelSpec",
    "Observation", "ReferenceTable", "SimulatorSpec", "StandardisationSpec",
    "WeightedSample", "calibrate_epsilon", "compute_scales", "distances",
    "generate_table", "kernel_weights", "rejection_abc", "__version__",
]
