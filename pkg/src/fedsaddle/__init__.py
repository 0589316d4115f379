"""Deterministic FedAvg simulator with gradient-noise moment certification.

Heterogeneous agents run scaled local stochastic epochs on a shared model;
the server samples a subset each round and averages the returned iterates.
Every round is also rewritten as a perturbed centralized gradient step, and
the statistical claims about the perturbation terms (zero mean, fourth-moment
envelopes, covariance identity and floor) are certified by Monte Carlo
against closed forms.  A saddle-escape study reproduces the qualitative
benchmark behaviour: every noisy configuration leaves the strict saddle and
settles at a second-order stationary point, while the noiseless control
started exactly at the saddle never moves.
"""

from .model import ModelPoint
from .problem import (
    AgentDataset,
    LogisticProblem,
    ProblemConfig,
    QuadraticProblem,
    Sample,
    SmoothnessEstimates,
)

__version__ = "0.1.0"

__all__ = [
    "ModelPoint",
    "Sample",
    "AgentDataset",
    "ProblemConfig",
    "SmoothnessEstimates",
    "LogisticProblem",
    "QuadraticProblem",
    "__version__",
]
