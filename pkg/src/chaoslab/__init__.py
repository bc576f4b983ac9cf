"""Numerical laboratory for mean-field interacting particle systems with singular kernels."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BlowUpError,
    ChaosLabError,
    ConfigError,
    ConstraintViolation,
    EstimationFailure,
    NumericalFailure,
    UsageError,
)
from .kernels import KernelSpec, builtin, classify  # noqa: F401
from .sde_engine import InitialLaw, SimConfig, TrajectoryBlock, run, run_linear  # noqa: F401
