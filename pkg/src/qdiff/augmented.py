"""Fibred Feynman-Kac generator on C^{Λ×Ω} and exact mean densities.

Index order of the fibre space is site-major, state-minor: (x, ω) -> x*M + ω.

The fibre at dual momentum k reproduces Σ_x e^{+ik·x} E ρ_t(x,x); the public
``exact_fourier_density`` therefore evaluates the fibre at -k so that it
returns Σ_x e^{-ik·x} E ρ_t(x,x) like ``dynamics.fourier_diagonal``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import QuadratureNotConverged
from .lattice import DensityMatrixInit, LatticeConfig
from .system import PeriodicSystem

logger = logging.getLogger(__name__)


def _as_vec(k, d: int) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (d,):
        raise ValueError(f"momentum must have {d} components, got shape {k.shape}")
    return k


def assemble_K(system: PeriodicSystem, k, p, derivative: tuple[int, ...] = ()) -> np.ndarray:
    """K̃_{k,p}, or its partial derivative in k along the axes in ``derivative``.

    (K̃ψ)(x,ω) = Σ_ζ h(ζ) e^{ip·ζ} [ψ([x-ζ],ω) - e^{-ik·ζ} ψ([x-ζ], σ_ζ ω)]
    """
    cfg, M = system.cfg, system.M
    k, p = _as_vec(k, cfg.d), _as_vec(p, cfg.d)
    n = system.dim
    K = np.zeros((n, n), dtype=complex)
    sites = cfg.sites()
    rows_x = np.repeat(np.arange(cfg.cell_size), M)
    rows_w = np.tile(np.arange(M), cfg.cell_size)
    rows = rows_x * M + rows_w
    for zeta, amp in system.hopping.entries.items():
        zeta = np.array(zeta)
        src = cfg.index(sites - zeta)[rows_x]
        perm = system.model.shift(zeta)
        coeff = amp * np.exp(1j * p @ zeta)
        factor = -np.exp(-1j * k @ zeta)
        for axis in derivative:
            factor = factor * (-1j * zeta[axis])
        if not derivative:
            np.add.at(K, (rows, src * M + rows_w), coeff)
        np.add.at(K, (rows, src * M + perm[rows_w]), coeff * factor)
    return K


def assemble_V(system: PeriodicSystem) -> np.ndarray:
    """Diagonal matrix of v_x(ω) - v_0(ω)."""
    return np.diag(system.potential.fluctuation().reshape(-1).astype(complex))


def assemble_B(system: PeriodicSystem) -> np.ndarray:
    return np.kron(np.eye(system.cfg.cell_size), system.generator.matrix).astype(complex)


@dataclass(frozen=True)
class AugmentedGenerator:
    k: np.ndarray
    p: np.ndarray
    matrix: np.ndarray


def assemble_L(system: PeriodicSystem, k, p) -> AugmentedGenerator:
    L = 1j * assemble_K(system, k, p) + 1j * assemble_V(system) + assemble_B(system)
    return AugmentedGenerator(_as_vec(k, system.cfg.d), _as_vec(p, system.cfg.d), L)


def transform_initial(rho0: DensityMatrixInit, k, p, cfg: LatticeConfig) -> np.ndarray:
    """ρ̃_{0;k,p}(x) = Σ_{η,y} ρ₀(x - Nη - y, -y) e^{ip·(x-Nη) - ik·y}, x ∈ Λ."""
    k, p = _as_vec(k, cfg.d), _as_vec(p, cfg.d)
    out = np.zeros(cfg.cell_size, dtype=complex)
    for (a, b), val in rho0.entries.items():
        a, b = np.array(a), np.array(b)
        # a = x - Nη - y and b = -y, so x - Nη = a - b
        unfolded = a - b
        out[cfg.index(unfolded)] += val * np.exp(1j * p @ unfolded + 1j * k @ b)
    return out


def lift(vec: np.ndarray, M: int) -> np.ndarray:
    """ψ ⊗ 1 in the fibre space."""
    return np.repeat(np.asarray(vec, dtype=complex), M)


def momentum_grid(cfg: LatticeConfig, Mp: int) -> np.ndarray:
    """Uniform tensor grid on [0, 2π/N)^d with Mp points per axis, shape (Mp^d, d)."""
    axis = 2 * np.pi * np.arange(Mp) / (cfg.N * Mp)
    mesh = np.meshgrid(*([axis] * cfg.d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def coarse_mask(cfg: LatticeConfig, Mp: int) -> np.ndarray:
    """Points of the Mp-grid that also belong to the (Mp//2)-grid."""
    idx = np.arange(Mp)
    mesh = np.meshgrid(*([idx] * cfg.d), indexing="ij")
    return np.all(np.stack([m.reshape(-1) % 2 == 0 for m in mesh]), axis=0)


def initial_profile_m(rho0: DensityMatrixInit, p, cfg: LatticeConfig) -> float:
    """m(p) = (2π)^{-d} Σ_j λ_j Σ_{ζ∈Λ} |ψ̂_j(p + 2πζ/N)|², always ≥ 0."""
    p = _as_vec(p, cfg.d)
    total = 0.0
    shifts = p[None, :] + 2 * np.pi * cfg.sites() / cfg.N
    for lam, psi in rho0.eigenstates():
        xs = np.array(list(psi.keys()), dtype=float)
        amps = np.array(list(psi.values()), dtype=complex)
        hat = np.exp(1j * shifts @ xs.T) @ amps
        total += lam * np.sum(np.abs(hat) ** 2)
    return float(total / (2 * np.pi) ** cfg.d)


def initial_profile_m_transform(rho0: DensityMatrixInit, p, cfg: LatticeConfig) -> complex:
    """Second route: (N/2π)^d ρ̃_{0;0,p}(0)."""
    zero = np.zeros(cfg.d)
    return (cfg.N / (2 * np.pi)) ** cfg.d * transform_initial(rho0, zero, p, cfg)[0]


def fibre_overlap(system: PeriodicSystem, L: np.ndarray, t: float, vec: np.ndarray) -> complex:
    """⟨δ₀⊗1, e^{-tL} vec⊗1⟩ in L²(Λ×Ω, μ)."""
    M = system.M
    out = sla.expm(-t * L) @ lift(vec, M)
    return complex(np.sum(system.model.mu * out[:M]))


@dataclass
class QuadratureResult:
    value: complex
    error: float
    points: int


def integrate_fibres(cfg: LatticeConfig, integrand, Mp: int = 16, tol: float = 1e-10,
                     max_points: int = 1024, rel: bool = False) -> QuadratureResult:
    """(N/2π)^d ∫_{T_N} integrand(p) dp by the uniform rule, certified by one doubling.

    ``integrand`` maps a (n, d) array of momenta to n values.  The grid is
    doubled until the coarse and fine answers agree to ``tol`` (relative to
    |value| when ``rel``, which suits integrands that are exponentially small).
    """
    if Mp < 4:
        raise ValueError("need at least 4 points per axis")
    cache = None
    while True:
        fine = 2 * Mp
        grid = momentum_grid(cfg, fine)
        mask = coarse_mask(cfg, fine)
        vals = np.empty(len(grid), dtype=complex)
        if cache is not None:
            vals[mask] = cache
            vals[~mask] = integrand(grid[~mask])
        else:
            vals[:] = integrand(grid)
        value = vals.mean()
        coarse = vals[mask].mean()
        err = abs(value - coarse)
        scale = abs(value) if rel else 1.0
        if err <= tol * scale:
            return QuadratureResult(complex(value), float(err), fine)
        if fine >= max_points:
            raise QuadratureNotConverged(
                f"p-quadrature changed by {err:.3g} at {fine} points per axis (tol {tol:g})"
            )
        Mp, cache = fine, vals


def exact_fourier_density(system: PeriodicSystem, rho0: DensityMatrixInit, k, t: float,
                          Mp: int = 16, tol: float = 1e-10, max_points: int = 1024,
                          detail: bool = False):
    """Σ_x e^{-ik·x} E ρ_t(x,x) from the fibred Feynman-Kac formula."""
    cfg = system.cfg
    kneg = -_as_vec(k, cfg.d)
    B = assemble_B(system)
    V = assemble_V(system)

    def integrand(ps):
        out = np.empty(len(ps), dtype=complex)
        for i, p in enumerate(ps):
            L = 1j * assemble_K(system, kneg, p) + 1j * V + B
            out[i] = fibre_overlap(system, L, t, transform_initial(rho0, kneg, p, cfg))
        return out

    res = integrate_fibres(cfg, integrand, Mp, tol, max_points)
    logger.debug("exact density k=%s t=%g: %d points, err %.2g", k, t, res.points, res.error)
    return res if detail else res.value


def exact_charge(system: PeriodicSystem, rho0: DensityMatrixInit, y, t: float,
                 Mp: int = 16, tol: float = 1e-12, max_points: int = 1024) -> complex:
    """Σ_x E ρ_t(x + Ny, x), conserved in t."""
    cfg = system.cfg
    y = np.atleast_1d(np.asarray(y, dtype=int))
    zero = np.zeros(cfg.d)
    B = assemble_B(system)
    V = assemble_V(system)

    def integrand(ps):
        out = np.empty(len(ps), dtype=complex)
        for i, p in enumerate(ps):
            L = 1j * assemble_K(system, zero, p) + 1j * V + B
            phase = np.exp(-1j * cfg.N * p @ y)
            out[i] = phase * fibre_overlap(system, L, t, transform_initial(rho0, zero, p, cfg))
        return out

    return integrate_fibres(cfg, integrand, Mp, tol, max_points).value
