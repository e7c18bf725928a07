"""Quantum diffusion in a Markov-driven periodic potential on Z^d."""
__version__ = "0.1.0"

from .lattice import CellFunction, DensityMatrixInit, HoppingKernel, LatticeConfig
from .markov import MarkovModel, build_cyclic_walk, verify_assumptions
from .system import PeriodicSystem

__all__ = [
    "CellFunction",
    "DensityMatrixInit",
    "HoppingKernel",
    "LatticeConfig",
    "MarkovModel",
    "PeriodicSystem",
    "build_cyclic_walk",
    "verify_assumptions",
]
