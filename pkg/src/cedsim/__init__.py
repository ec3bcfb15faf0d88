"""cedsim: exact stochastic simulation and phase-diagram tools for a lattice
gas of diffusing, coalescing massive particles with monomer deposition and
unit-mass evaporation."""

__version__ = "0.1.0"

from .model import (
    DEPOSIT,
    EVAPORATE,
    HOP,
    Event,
    Geometry,
    LatticeState,
    MassOverflowError,
    Params,
    apply_event,
    new_lattice,
    total_rate,
)

__all__ = [
    "__version__",
    "Geometry",
    "Params",
    "LatticeState",
    "Event",
    "HOP",
    "EVAPORATE",
    "DEPOSIT",
    "MassOverflowError",
    "new_lattice",
    "apply_event",
    "total_rate",
]
