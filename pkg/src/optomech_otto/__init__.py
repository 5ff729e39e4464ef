"""Quantum Otto engine on a quadratically coupled optomechanical system.

The package integrates the time-periodic Lindblad master equation of a driven
cavity coupled to a mechanical resonator, extracts the stroboscopic limit
cycle and evaluates the engine figures of merit (cycle work, dissipated
power, power under load, free-energy work capacity) for quadratic and linear
optomechanical coupling.
"""

__version__ = "0.1.0"

from .fock import JointSpace, annihilation, quadrature_ops, tensor
from .model import (
    CouplingKind,
    DriveSchedule,
    EngineParams,
    build_hamiltonian,
    mean_occupation,
    stability_check,
    temperature_from_occupation,
)
from .lindblad import (
    DensityMatrix,
    Liouvillian,
    Trajectory,
    build_liouvillian,
    evolve,
    limit_cycle,
)

__all__ = [
    "__version__",
    "JointSpace",
    "annihilation",
    "quadrature_ops",
    "tensor",
    "CouplingKind",
    "DriveSchedule",
    "EngineParams",
    "build_hamiltonian",
    "mean_occupation",
    "stability_check",
    "temperature_from_occupation",
    "DensityMatrix",
    "Liouvillian",
    "Trajectory",
    "build_liouvillian",
    "evolve",
    "limit_cycle",
]
