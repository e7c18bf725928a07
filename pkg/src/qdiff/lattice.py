"""Lattice geometry, hopping kernels, cell potentials and initial density matrices.

Λ = [0, N)^d ∩ Z^d is enumerated in C (row-major) order; ``LatticeConfig.index``
maps a (folded) lattice vector to its position in that enumeration.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import minimize

from .errors import DegenerateHopping, SymmetryViolation

Site = tuple[int, ...]

RANK_TOL = 1e-12
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class LatticeConfig:
    d: int
    N: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.N < 2:
            raise ValueError(f"period must be >= 2, got {self.N}")

    @property
    def cell_size(self) -> int:
        return self.N**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    def sites(self) -> np.ndarray:
        """All points of Λ as an integer array of shape (N^d, d)."""
        return np.array(list(itertools.product(range(self.N), repeat=self.d)), dtype=int)

    def fold(self, x) -> np.ndarray:
        return fold(x, self)

    def index(self, x) -> np.ndarray | int:
        """Flat index in Λ of the folded vector(s) ``x`` (last axis = coordinates)."""
        fx = self.fold(x)
        idx = np.ravel_multi_index(tuple(np.moveaxis(fx, -1, 0)), self.shape)
        return int(idx) if np.ndim(idx) == 0 else idx


def fold(x, cfg: LatticeConfig) -> np.ndarray:
    """Reduce each coordinate of ``x`` into [0, N)."""
    x = np.asarray(x, dtype=int)
    if x.ndim == 0:
        x = x.reshape(1)
    return np.mod(x, cfg.N)


@dataclass(frozen=True)
class HoppingKernel:
    """Finitely supported hopping amplitudes h(x), x ∈ Z^d.

    Zero amplitudes are dropped on construction.
    """

    entries: Mapping[Site, complex]

    def __post_init__(self):
        clean = {tuple(int(c) for c in x): complex(a) for x, a in self.entries.items() if a != 0}
        dims = {len(x) for x in clean}
        if len(dims) > 1:
            raise ValueError(f"hopping vectors of mixed dimension: {sorted(dims)}")
        object.__setattr__(self, "entries", clean)

    @classmethod
    def nearest_neighbour(cls, d: int, amplitude: complex = 1.0) -> "HoppingKernel":
        entries = {}
        for i in range(d):
            e = [0] * d
            e[i] = 1
            entries[tuple(e)] = amplitude
            e[i] = -1
            entries[tuple(e)] = np.conj(amplitude)
        return cls(entries)

    @property
    def vectors(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0), dtype=int)
        return np.array(list(self.entries.keys()), dtype=int)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array(list(self.entries.values()), dtype=complex)

    def symbol(self, k) -> np.ndarray:
        """ĥ(k) = Σ_x e^{i x·k} h(x); ``k`` has coordinates on its last axis."""
        k = np.asarray(k, dtype=float)
        phase = np.tensordot(k, self.vectors.T, axes=([-1], [0]))
        return np.exp(1j * phase) @ self.amplitudes

    def l1_norm(self) -> float:
        return float(np.abs(self.amplitudes).sum())

    def first_moment(self) -> float:
        """Σ_x |x| |h(x)| (Euclidean |x|), the Lipschitz constant of ĥ."""
        return float(np.sum(np.linalg.norm(self.vectors, axis=1) * np.abs(self.amplitudes)))

    def second_moment(self) -> float:
        return float(np.sum(np.sum(self.vectors**2, axis=1) * np.abs(self.amplitudes)))

    def ballistic_speed(self) -> float:
        """2 Σ_x ‖x‖_∞ |h(x)|, used to size simulation boxes."""
        return float(2 * np.sum(np.max(np.abs(self.vectors), axis=1) * np.abs(self.amplitudes)))

    def support_radius(self) -> int:
        return int(np.max(np.abs(self.vectors))) if self.entries else 0


@dataclass
class HoppingReport:
    hermitian: bool
    rank: int
    d: int
    sup_sampled: float
    sup_bound: float
    errors: list[Exception] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_for_errors(self):
        if self.errors:
            raise self.errors[0]


def default_symbol_grid(d: int) -> int:
    # keep the tensor grid at or below 2^20 points
    return int(min(2**12, 2 ** (20 // d)))


def symbol_sup(h: HoppingKernel, d: int, points: int | None = None) -> tuple[float, float]:
    """Max of |ĥ| (grid argmax polished by local ascent) and a certified upper bound.

    The bound uses that |ĥ|² attains its maximum at a critical point, so the
    grid maximum of |ĥ|² is short by at most ½·sup|∂²|ĥ|²|·(Δ/2)²·d.
    """
    if not h.entries:
        return 0.0, 0.0
    points = points or default_symbol_grid(d)
    # evaluate on the tensor grid via FFT of the kernel embedded in a points^d array
    arr = np.zeros((points,) * d, dtype=complex)
    for x, a in h.entries.items():
        arr[tuple(np.mod(x, points))] += a
    vals = np.fft.ifftn(arr) * points**d  # Σ_x h(x) e^{+i x·k}
    sq = np.abs(vals) ** 2
    grid_sq = float(sq.max())
    step = 2 * np.pi / points
    curvature = 2 * h.first_moment() ** 2 + 2 * h.l1_norm() * h.second_moment()
    bound = min(np.sqrt(grid_sq + 0.5 * curvature * d * (step / 2) ** 2), h.l1_norm())
    k0 = step * np.array(np.unravel_index(np.argmax(sq), sq.shape), dtype=float)
    polished = _polish_symbol_max(h, k0)
    sup = max(np.sqrt(grid_sq), polished)
    return float(sup), float(max(bound, sup))


def _polish_symbol_max(h: HoppingKernel, k0: np.ndarray) -> float:
    X, A = h.vectors.astype(float), h.amplitudes

    def negsq(k):
        e = np.exp(1j * X @ k) * A
        s = e.sum()
        grad = -2 * np.real(np.conj(s) * (1j * X.T @ e))
        return -abs(s) ** 2, grad

    res = minimize(negsq, k0, jac=True, method="BFGS", options={"gtol": 1e-13})
    return float(np.sqrt(max(-res.fun, 0.0)))


def validate_hopping(
    h: HoppingKernel, d: int, points: int | None = None, raise_on_error: bool = True
) -> HoppingReport:
    """Check Hermitian symmetry and that the support spans R^d; bound ‖ĥ‖_∞."""
    errors: list[Exception] = []
    if h.entries and h.vectors.shape[1] != d:
        raise ValueError(f"hopping vectors have dimension {h.vectors.shape[1]}, expected {d}")
    hermitian = True
    for x, a in h.entries.items():
        partner = h.entries.get(tuple(-c for c in x), 0.0)
        if abs(partner - np.conj(a)) > SYMMETRY_TOL * max(1.0, abs(a)):
            hermitian = False
            errors.append(SymmetryViolation(f"h(-x) != conj(h(x)) at x={x}: {partner} vs {np.conj(a)}"))
            break
    if h.entries:
        sv = np.linalg.svd(h.vectors.astype(float), compute_uv=False)
        rank = int(np.sum(sv > RANK_TOL))
    else:
        rank = 0
    if rank < d:
        errors.append(
            DegenerateHopping(f"hopping support spans a {rank}-dimensional subspace of R^{d}")
        )
    sampled, bound = symbol_sup(h, d, points)
    report = HoppingReport(hermitian, rank, d, sampled, bound, errors)
    if raise_on_error:
        report.raise_for_errors()
    return report


@dataclass(frozen=True)
class CellFunction:
    """A real function on Λ, stored flat in ``LatticeConfig.sites()`` order."""

    cfg: LatticeConfig
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.size != self.cfg.cell_size:
            raise ValueError(f"cell function needs {self.cfg.cell_size} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("cell function values must be finite")
        object.__setattr__(self, "values", vals)

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.cfg.shape)

    def at(self, x) -> np.ndarray:
        return self.values[self.cfg.index(x)]


def check_no_smaller_period(U: CellFunction, cfg: LatticeConfig | None = None) -> bool:
    """True iff Σ_{y∈Λ} |U([x+y]_N) - U(y)| > 0 for every x ∈ Λ \\ {0}."""
    cfg = cfg or U.cfg
    grid = U.grid()
    for x in cfg.sites()[1:]:
        shifted = np.roll(grid, shift=tuple(-x), axis=tuple(range(cfg.d)))
        if np.sum(np.abs(shifted - grid)) == 0:
            return False
    return True


def _normalize_amplitudes(amps: Mapping) -> dict[Site, complex]:
    out = {}
    for x, a in amps.items():
        key = (int(x),) if np.ndim(x) == 0 else tuple(int(c) for c in x)
        out[key] = out.get(key, 0) + complex(a)
    return {x: a for x, a in out.items() if a != 0}


@dataclass(frozen=True)
class DensityMatrixInit:
    """A finitely supported density matrix ρ₀ on ℓ²(Z^d).

    Either built from a mixture of normalized states (``states``) or from raw
    kernel entries; the other representation is derived on demand.
    """

    entries: Mapping[tuple[Site, Site], complex]
    states: tuple[tuple[float, Mapping[Site, complex]], ...] | None = None

    @classmethod
    def pure(cls, amplitudes: Mapping, normalize: bool = True) -> "DensityMatrixInit":
        return cls.mixture([(1.0, amplitudes)], normalize=normalize)

    @classmethod
    def mixture(cls, states: Iterable[tuple[float, Mapping]], normalize: bool = True):
        clean = []
        entries: dict[tuple[Site, Site], complex] = {}
        for weight, amps in states:
            if weight < 0:
                raise ValueError("mixture weights must be non-negative")
            psi = _normalize_amplitudes(amps)
            if normalize:
                nrm = np.sqrt(sum(abs(a) ** 2 for a in psi.values()))
                psi = {x: a / nrm for x, a in psi.items()}
            clean.append((float(weight), psi))
            for x, a in psi.items():
                for y, b in psi.items():
                    entries[(x, y)] = entries.get((x, y), 0) + weight * a * np.conj(b)
        return cls(entries, tuple(clean))

    @classmethod
    def delta(cls, d: int, site: Site | None = None) -> "DensityMatrixInit":
        site = tuple(site) if site is not None else (0,) * d
        return cls.pure({site: 1.0})

    @property
    def d(self) -> int:
        return len(next(iter(self.entries))[0])

    def support(self) -> list[Site]:
        sites = set()
        for x, y in self.entries:
            sites.add(x)
            sites.add(y)
        return sorted(sites)

    def trace(self) -> complex:
        return sum(v for (x, y), v in self.entries.items() if x == y)

    def l1_norm(self) -> float:
        return float(sum(abs(v) for v in self.entries.values()))

    def matrix(self, sites: list[Site] | None = None) -> tuple[list[Site], np.ndarray]:
        sites = sites or self.support()
        pos = {s: i for i, s in enumerate(sites)}
        mat = np.zeros((len(sites), len(sites)), dtype=complex)
        for (x, y), v in self.entries.items():
            mat[pos[x], pos[y]] += v
        return sites, mat

    def eigenstates(self, tol: float = 1e-14) -> list[tuple[float, dict[Site, complex]]]:
        """(λ_j, ψ_j) with orthonormal ψ_j; uses stored states when orthogonality is not needed."""
        if self.states is not None and len(self.states) == 1:
            return [(w, dict(psi)) for w, psi in self.states]
        sites, mat = self.matrix()
        lam, vecs = np.linalg.eigh(0.5 * (mat + mat.conj().T))
        out = []
        for j in range(len(lam)):
            if lam[j] > tol:
                out.append((float(lam[j]), {s: vecs[i, j] for i, s in enumerate(sites) if vecs[i, j] != 0}))
        return out

    def validate(self, tol: float = 1e-10) -> None:
        _, mat = self.matrix()
        if np.max(np.abs(mat - mat.conj().T), initial=0) > tol:
            raise ValueError("density matrix is not Hermitian")
        lam = np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))
        if lam.min() < -tol:
            raise ValueError(f"density matrix is not non-negative (min eigenvalue {lam.min():.3g})")
        if self.states is not None and self.trace().real > 1 + tol:
            raise ValueError(f"trace {self.trace().real:.12g} exceeds 1")
