"""Monte Carlo evolution of wave packets under sampled potential paths.

The infinite lattice is truncated to a box ‖x‖_∞ ≤ R with hard walls.  Along a
path the Hamiltonian H_ω = L + diag(v_·(ω)) is piecewise constant, so each
interval is propagated exactly: by a cached eigendecomposition of H_ω for
boxes up to ``DENSE_LIMIT`` sites, by ``expm_multiply`` above that.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .errors import BoxLeakage, NormDrift
from .lattice import DensityMatrixInit, Site
from .markov import PotentialPath, sample_path
from .system import PeriodicSystem

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096
LEAKAGE_TOL = 1e-10
NORM_TOL = 1e-9


@dataclass(frozen=True)
class SimulationBox:
    d: int
    radius: int

    @classmethod
    def for_evolution(cls, system: PeriodicSystem, t: float, support_radius: int = 0,
                      margin: int = 8) -> "SimulationBox":
        speed = system.hopping.ballistic_speed()
        return cls(system.cfg.d, support_radius + math.ceil(speed * abs(t)) + margin)

    @property
    def width(self) -> int:
        return 2 * self.radius + 1

    @property
    def size(self) -> int:
        return self.width**self.d

    def sites(self) -> np.ndarray:
        r = range(-self.radius, self.radius + 1)
        return np.array(list(itertools.product(r, repeat=self.d)), dtype=int)

    def index(self, x) -> int:
        x = np.asarray(x, dtype=int) + self.radius
        if np.any(x < 0) or np.any(x >= self.width):
            raise IndexError(f"site {tuple(x - self.radius)} outside box of radius {self.radius}")
        return int(np.ravel_multi_index(tuple(x), (self.width,) * self.d))

    def shell_mask(self, thickness: int = 2) -> np.ndarray:
        return np.max(np.abs(self.sites()), axis=1) > self.radius - thickness


@dataclass
class WaveState:
    box: SimulationBox
    amplitudes: np.ndarray
    time: float = 0.0

    @classmethod
    def from_amplitudes(cls, box: SimulationBox, amps: Mapping[Site, complex],
                        normalize: bool = True) -> "WaveState":
        psi = np.zeros(box.size, dtype=complex)
        for x, a in amps.items():
            psi[box.index(np.atleast_1d(x))] += a
        if normalize:
            psi /= np.linalg.norm(psi)
        return cls(box, psi)

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def hopping_matrix(system: PeriodicSystem, box: SimulationBox) -> sp.csr_matrix:
    """L restricted to the box: L[x, y] = h(x - y)."""
    sites = box.sites()
    rows, cols, vals = [], [], []
    for zeta, amp in system.hopping.entries.items():
        target = sites + np.array(zeta)
        inside = np.all(np.abs(target) <= box.radius, axis=1)
        src = np.nonzero(inside)[0]
        dst = np.ravel_multi_index(tuple((target[inside] + box.radius).T), (box.width,) * box.d)
        rows.append(dst)
        cols.append(src)
        vals.append(np.full(src.size, amp))
    if not rows:
        return sp.csr_matrix((box.size, box.size), dtype=complex)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(box.size, box.size), dtype=complex,
    )


class Propagator:
    """Exact propagators e^{-i H_ω t} on a box, cached per Markov state."""

    def __init__(self, system: PeriodicSystem, box: SimulationBox):
        self.system = system
        self.box = box
        self.L = hopping_matrix(system, box)
        cell_idx = system.cfg.index(box.sites())
        self.onsite = system.potential.table[cell_idx]  # (box sites, M)
        self._eig: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.dense = box.size <= DENSE_LIMIT

    def hamiltonian(self, w: int):
        H = self.L + sp.diags(self.onsite[:, w])
        return H.toarray() if self.dense else H.tocsr()

    def _eigh(self, w: int):
        if w not in self._eig:
            self._eig[w] = np.linalg.eigh(self.hamiltonian(w))
        return self._eig[w]

    def apply(self, psi: np.ndarray, w: int, dt: float) -> np.ndarray:
        """e^{-i H_ω dt} applied to one vector or to the columns of a matrix."""
        if dt == 0:
            return psi
        if self.dense:
            E, U = self._eigh(w)
            phase = np.exp(-1j * E * dt)
            coef = U.conj().T @ psi
            coef = phase[:, None] * coef if coef.ndim == 2 else phase * coef
            return U @ coef
        return expm_multiply(-1j * dt * self.hamiltonian(w), psi)


def _check(state: np.ndarray, box: SimulationBox, tol: float, leak_tol: float):
    drift = abs(np.linalg.norm(state) - 1.0)
    if drift > tol:
        raise NormDrift(f"norm drifted by {drift:.3g}")
    leak = float(np.sum(np.abs(state[box.shell_mask()]) ** 2))
    if leak > leak_tol:
        raise BoxLeakage(f"mass {leak:.3g} in the outer shell of a radius-{box.radius} box")


def evolve_path(psi0: WaveState, path: PotentialPath, system: PeriodicSystem, t: float,
                tol: float = NORM_TOL, leak_tol: float = LEAKAGE_TOL,
                propagator: Propagator | None = None) -> WaveState:
    """Solve i∂_t ψ = Lψ + v_x(ω(t))ψ along ``path`` up to time t."""
    prop = propagator or Propagator(system, psi0.box)
    psi = psi0.amplitudes
    for w, dt in path.intervals(t):
        psi = prop.apply(psi, w, dt)
    _check(psi, psi0.box, tol, leak_tol)
    return WaveState(psi0.box, psi, psi0.time + t)


def evolve_frozen(psi0: WaveState, system: PeriodicSystem, w: int, t: float,
                  propagator: Propagator | None = None) -> WaveState:
    """Evolution with the potential frozen in state w; t may be negative."""
    prop = propagator or Propagator(system, psi0.box)
    return WaveState(psi0.box, prop.apply(psi0.amplitudes, w, t), psi0.time + t)


def density_on_box(rho0: DensityMatrixInit, box: SimulationBox) -> np.ndarray:
    rho = np.zeros((box.size, box.size), dtype=complex)
    for (x, y), v in rho0.entries.items():
        rho[box.index(x), box.index(y)] += v
    return rho


def evolve_density_path(rho0: DensityMatrixInit, path: PotentialPath, system: PeriodicSystem,
                        t: float, box: SimulationBox, tol: float = NORM_TOL,
                        leak_tol: float = LEAKAGE_TOL, method: str = "auto",
                        propagator: Propagator | None = None) -> np.ndarray:
    """ρ_t on box × box: ρ_t = U ρ₀ U† with U the path propagator.

    ``method='states'`` evolves the eigenvectors of ρ₀ (cheaper when rank ≪ box);
    ``'matrix'`` conjugates the full matrix.
    """
    prop = propagator or Propagator(system, box)
    states = rho0.eigenstates()
    if method == "auto":
        method = "states" if len(states) * box.size < box.size**2 else "matrix"
    trace0 = rho0.trace().real
    if method == "states":
        rho = np.zeros((box.size, box.size), dtype=complex)
        for lam, amps in states:
            psi = evolve_path(WaveState.from_amplitudes(box, amps, normalize=False),
                              path, system, t, tol, leak_tol, prop)
            rho += lam * np.outer(psi.amplitudes, psi.amplitudes.conj())
    elif method == "matrix":
        rho = density_on_box(rho0, box)
        for w, dt in path.intervals(t):
            rho = prop.apply(rho, w, dt)  # U ρ
            rho = prop.apply(rho.conj().T, w, dt).conj().T  # (U (Uρ)†)† = Uρ U†
    else:
        raise ValueError(f"unknown method {method!r}")
    drift = abs(np.trace(rho).real - trace0)
    if drift > tol:
        raise NormDrift(f"trace drifted by {drift:.3g}")
    leak = float(np.sum(np.abs(np.diag(rho))[box.shell_mask()]))
    if leak > leak_tol:
        raise BoxLeakage(f"mass {leak:.3g} in the outer shell of a radius-{box.radius} box")
    return rho


@dataclass
class EnsembleDensity:
    box: SimulationBox
    mean: np.ndarray
    stderr: np.ndarray
    samples: int
    per_sample: np.ndarray | None = None

    def total_mass(self) -> float:
        return float(self.mean.sum())


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Counter-based seed for sample ``index``: independent of scheduling order."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


def _run_samples(indices, psi0, system, t, seed, box, tol, leak_tol):
    prop = Propagator(system, box)
    out = np.empty((len(indices), box.size))
    for row, i in enumerate(indices):
        path = sample_path(system.model, t, sample_seed(seed, i))
        out[row] = evolve_path(psi0, path, system, t, tol, leak_tol, prop).density()
    return out


def ensemble_mean_density(psi0: WaveState, system: PeriodicSystem, t: float, samples: int,
                          seed: int, workers: int = 1, keep_samples: bool = True,
                          tol: float = NORM_TOL, leak_tol: float = LEAKAGE_TOL) -> EnsembleDensity:
    """Estimate E|ψ_t(x)|² over ``samples`` independent potential paths."""
    if samples < 2:
        raise ValueError("need at least 2 samples for a standard error")
    box = psi0.box
    chunks = np.array_split(np.arange(samples), max(1, workers) * 4)
    chunks = [c for c in chunks if c.size]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(
                lambda c: _run_samples(c, psi0, system, t, seed, box, tol, leak_tol), chunks))
    else:
        parts = [_run_samples(c, psi0, system, t, seed, box, tol, leak_tol) for c in chunks]
    data = np.concatenate(parts, axis=0)
    mean = data.mean(axis=0)
    stderr = data.std(axis=0, ddof=1) / np.sqrt(samples)
    return EnsembleDensity(box, mean, stderr, samples, data if keep_samples else None)


def fourier_diagonal(density: EnsembleDensity, k) -> tuple[complex, float]:
    """Σ_x e^{-ik·x} mean(x) and its standard error.

    With per-sample data the error is sqrt(Var Re + Var Im)/√S of the per-sample
    transforms; otherwise Σ_x stderr(x), which bounds it from above.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    phase = np.exp(-1j * density.box.sites() @ k)
    value = complex(phase @ density.mean)
    if density.per_sample is not None:
        vals = density.per_sample @ phase
        var = vals.real.var(ddof=1) + vals.imag.var(ddof=1)
        return value, float(np.sqrt(var / density.samples))
    return value, float(np.sum(density.stderr))


def quasimomentum_charge(rho: np.ndarray, box: SimulationBox, y, N: int) -> complex:
    """Σ_x ρ(x + Ny, x) over the box."""
    y = np.atleast_1d(np.asarray(y, dtype=int))
    sites = box.sites()
    target = sites + N * y
    inside = np.all(np.abs(target) <= box.radius, axis=1)
    rows = np.ravel_multi_index(tuple((target[inside] + box.radius).T), (box.width,) * box.d)
    cols = np.nonzero(inside)[0]
    return complex(np.sum(rho[rows, cols]))


def ensemble_mean_charge(psi0: WaveState, system: PeriodicSystem, t: float, y, samples: int,
                         seed: int) -> tuple[complex, float]:
    """Monte Carlo mean of Σ_x ψ_t(x+Ny) conj ψ_t(x) with its standard error."""
    box = psi0.box
    prop = Propagator(system, box)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    sites = box.sites()
    target = sites + system.cfg.N * y
    inside = np.all(np.abs(target) <= box.radius, axis=1)
    rows = np.ravel_multi_index(tuple((target[inside] + box.radius).T), (box.width,) * box.d)
    cols = np.nonzero(inside)[0]
    vals = np.empty(samples, dtype=complex)
    for i in range(samples):
        path = sample_path(system.model, t, sample_seed(seed, i))
        psi = evolve_path(psi0, path, system, t, propagator=prop).amplitudes
        vals[i] = np.sum(psi[rows] * psi[cols].conj())
    err = np.sqrt((vals.real.var(ddof=1) + vals.imag.var(ddof=1)) / samples)
    return complex(vals.mean()), float(err)
