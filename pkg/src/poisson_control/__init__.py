"""Markovian queues whose service speed is reset at Poisson inspection times."""

from .core import (
    INF,
    DomainError,
    JointDist,
    ModelError,
    ModelParams,
    NoConvergence,
    NonPositiveRate,
    NumericalError,
    PgfPoint,
    SingularSystem,
    TruncationTooSmall,
    UnstableFinite,
    UnstableFiniteWarning,
    UnstableObserver,
    Variant,
    pgf_eval,
    validate_params,
)

__version__ = "0.1.0"
