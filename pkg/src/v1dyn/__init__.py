"""Simulation and inference toolkit for the spin-optical dynamics of the
V1 silicon-vacancy center in 4H-SiC.

Subpackages:

* `model`     - parameter and result types, unit conventions
* `ratedyn`   - five-level classical rate-equation dynamics
* `lindblad`  - six-level Lindblad dynamics with coherent drive
* `inference` - fitting routines and custom optimizers
* `photophys` - radiative and nonradiative photophysics chain
* `cli`       - command-line entry point (`v1dyn`)
"""

from .model import (
    LEVELS_5,
    LEVELS_6,
    DeltaPulse,
    FieldCalibration,
    FitResult,
    FluorescenceTrace,
    GaussianPulse,
    LevelPopulations,
    MaterialParams,
    NoSolutionError,
    PulseSequence,
    QuasiCW,
    RateSet,
    SixLevelParams,
    V1_RATES,
    V1_RATES_DEPLETION,
    Wait,
    rate_set_from_lifetimes,
)

__version__ = "0.1.0"

__all__ = [
    "LEVELS_5",
    "LEVELS_6",
    "DeltaPulse",
    "FieldCalibration",
    "FitResult",
    "FluorescenceTrace",
    "GaussianPulse",
    "LevelPopulations",
    "MaterialParams",
    "NoSolutionError",
    "PulseSequence",
    "QuasiCW",
    "RateSet",
    "SixLevelParams",
    "V1_RATES",
    "V1_RATES_DEPLETION",
    "Wait",
    "rate_set_from_lifetimes",
    "__version__",
]
