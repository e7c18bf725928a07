"""The bundle (lattice, hopping, Markov driver, potential) shared by all solvers."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .lattice import CellFunction, HoppingKernel, LatticeConfig, symbol_sup
from .markov import (
    BackwardGenerator,
    MarkovModel,
    PotentialAssignment,
    backward_generator,
    build_cyclic_walk,
    chi_constant,
    jiggling_potential,
)


@dataclass(frozen=True, eq=False)
class PeriodicSystem:
    cfg: LatticeConfig
    hopping: HoppingKernel
    model: MarkovModel
    potential: PotentialAssignment

    @classmethod
    def jiggling(cls, cfg: LatticeConfig, hopping: HoppingKernel, U, rate: float = 1.0):
        U = U if isinstance(U, CellFunction) else CellFunction(cfg, U)
        model = build_cyclic_walk(cfg, rate)
        return cls(cfg, hopping, model, jiggling_potential(U, model))

    @property
    def M(self) -> int:
        return self.model.M

    @property
    def dim(self) -> int:
        """Dimension of the fibre space C^{Λ×Ω}."""
        return self.cfg.cell_size * self.model.M

    @cached_property
    def generator(self) -> BackwardGenerator:
        return backward_generator(self.model)

    @cached_property
    def weights(self) -> np.ndarray:
        """μ-weights of the fibre inner product, in (site-major, state-minor) order."""
        return np.tile(self.model.mu, self.cfg.cell_size)

    @cached_property
    def h_sup(self) -> float:
        return symbol_sup(self.hopping, self.cfg.d)[1]

    @cached_property
    def V_norm(self) -> float:
        return self.potential.fluctuation_norm()

    @cached_property
    def chi(self) -> float:
        return chi_constant(self.model, self.generator, self.potential)

    def constants(self) -> dict[str, float]:
        B = self.generator
        return {
            "gamma": B.gamma,
            "invT": B.invT,
            "T": B.T,
            "chi": self.chi,
            "h_sup": self.h_sup,
            "V_norm": self.V_norm,
        }

    def ground_vector(self) -> np.ndarray:
        """δ₀⊗1, unit norm in the μ-weighted inner product."""
        g = np.zeros(self.dim, dtype=complex)
        g[: self.M] = 1.0
        return g

    def inner(self, a, b) -> complex:
        return complex(np.vdot(a, self.weights * np.asarray(b)))

    def norm(self, a) -> float:
        return float(np.sqrt(np.sum(self.weights * np.abs(a) ** 2)))

    def to_orthonormal(self, A: np.ndarray) -> np.ndarray:
        """Similarity S A S⁻¹ into a Euclidean-orthonormal basis (S = diag √μ)."""
        s = np.sqrt(self.weights)
        return (s[:, None] * A) / s[None, :]

    def op_norm(self, A: np.ndarray) -> float:
        return float(np.linalg.norm(self.to_orthonormal(A), 2))
