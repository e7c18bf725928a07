"""Spectral analysis of the fibred generator L̃_{k,p}.

Everything is computed with dense linear algebra in the μ-weighted inner
product of C^{Λ×Ω}.  The zero mode at k = 0 is δ₀⊗1 (both left and right),
and the slow branch E_p(k) continues it for small k.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .augmented import (
    assemble_B,
    assemble_K,
    assemble_L,
    assemble_V,
    lift,
    momentum_grid,
    _as_vec,
)
from .errors import (
    BranchCollision,
    DegenerateZero,
    FitUnstable,
    GapTooSmall,
    NotPositiveDefinite,
    SingularRestriction,
)
from .system import PeriodicSystem

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-10
COND_LIMIT = 1e8


def _mean_zero_basis(mu: np.ndarray) -> np.ndarray:
    """Columns span the μ-mean-zero functions and are orthonormal in L²(μ)."""
    P = sla.null_space(np.sqrt(mu)[None, :])
    return P / np.sqrt(mu)[:, None]


@dataclass
class SchurComplement:
    p: np.ndarray
    z: complex
    matrix: np.ndarray

    def real_part(self) -> np.ndarray:
        return 0.5 * (self.matrix + self.matrix.conj().T)


def schur_complement(system: PeriodicSystem, p, z: complex = 0.0) -> SchurComplement:
    """Γ_p(z) = P₀Ṽ(P₀^⊥ L̃_{0,p} P₀^⊥ - z)⁻¹ṼP₀ as a matrix on C^Λ."""
    cfg, M = system.cfg, system.M
    p = _as_vec(p, cfg.d)
    L = assemble_L(system, np.zeros(cfg.d), p).matrix
    V = assemble_V(system)
    W = system.weights
    E = np.kron(np.eye(cfg.cell_size), _mean_zero_basis(system.model.mu))
    A = E.conj().T @ (W[:, None] * ((L - z * np.eye(system.dim)) @ E))
    if np.linalg.cond(A) > 1e12:
        raise SingularRestriction(f"restricted generator is singular at p={p}, z={z}")
    ground = np.kron(np.eye(cfg.cell_size), np.ones((M, 1)))  # columns δ_x⊗1
    rhs = E.conj().T @ (W[:, None] * (V @ ground))
    g = np.linalg.solve(A, rhs)
    gamma = ground.conj().T @ (W[:, None] * (V @ (E @ g)))
    return SchurComplement(p, complex(z), gamma)


def gap_lower_bound(gamma: float, T: float, chi: float, h_sup: float, V_norm: float) -> float:
    """Explicit p-independent lower bound on the gap of L̃_{0,p}."""
    den = (2 + gamma + 4 * T * h_sup + 4 * T * V_norm) ** 2 + V_norm**2 * chi**2
    return chi**2 / (T * den)


def schur_coercivity_bound(T: float, chi: float, h_sup: float, V_norm: float, z: complex = 0.0) -> float:
    """Lower bound for Re Γ_p(z) on the complement of δ₀."""
    return (1 / T - np.real(z)) * chi**2 / (1 + T * (2 * h_sup + 2 * V_norm + abs(z))) ** 2


def system_gap_bound(system: PeriodicSystem) -> float:
    c = system.constants()
    return gap_lower_bound(c["gamma"], c["T"], c["chi"], c["h_sup"], c["V_norm"])


@dataclass
class SpectrumSplit:
    p: np.ndarray
    eigenvalues: np.ndarray
    zero_count: int
    delta_numeric: float
    delta_bound: float | None = None

    @property
    def bound_holds(self) -> bool:
        return self.delta_bound is None or self.delta_numeric >= self.delta_bound


def spectrum_split(system: PeriodicSystem, p, zero_tol: float = ZERO_TOL,
                   delta_bound: float | None = None, check_bound: bool = True) -> SpectrumSplit:
    """Zero-mode multiplicity and min Re of the rest of σ(L̃_{0,p})."""
    p = _as_vec(p, system.cfg.d)
    ev = np.linalg.eigvals(assemble_L(system, np.zeros(system.cfg.d), p).matrix)
    zero = np.abs(ev) < zero_tol
    if zero.sum() != 1:
        raise DegenerateZero(f"{zero.sum()} eigenvalues of L_(0,p) at 0 for p={p}")
    split = SpectrumSplit(p, ev, 1, float(ev[~zero].real.min()), delta_bound)
    if check_bound and not split.bound_holds:
        raise GapTooSmall(f"gap {split.delta_numeric:.6g} below the explicit bound {delta_bound:.6g} at p={p}")
    return split


@dataclass
class EigenBranch:
    k: np.ndarray
    p: np.ndarray
    E: complex
    phi_R: np.ndarray
    phi_L: np.ndarray
    Q: np.ndarray
    gradient: np.ndarray
    others: np.ndarray = field(repr=False, default=None)


def eigen_branch(system: PeriodicSystem, k, p, gap0: float | None = None,
                 L: np.ndarray | None = None) -> EigenBranch:
    """Isolated eigenvalue of L̃_{k,p} continuing 0, with its Riesz projection.

    The branch is the eigenvalue nearest 0; it counts as isolated while every
    other eigenvalue stays at least gap0/2 away from it, gap0 being the k = 0
    gap at the same p.
    """
    cfg = system.cfg
    k, p = _as_vec(k, cfg.d), _as_vec(p, cfg.d)
    if gap0 is None:
        gap0 = spectrum_split(system, p, check_bound=False).delta_numeric
    if L is None:
        L = assemble_L(system, k, p).matrix
    ev, vl, vr = sla.eig(L, left=True, right=True)
    i = int(np.argmin(np.abs(ev)))
    sep = np.abs(np.delete(ev, i) - ev[i]).min()
    if sep < gap0 / 2:
        raise BranchCollision(f"eigenvalues {sep:.3g} apart near E={ev[i]:.4g} at k={k}, p={p}")
    W = system.weights
    phi = vr[:, i]
    phi = phi / system.norm(phi)
    overlap = system.inner(system.ground_vector(), phi)
    phi = phi * (abs(overlap) / overlap if abs(overlap) > 1e-14 else 1.0)
    u = vl[:, i]
    Q = np.outer(phi, u.conj()) / (u.conj() @ phi)
    # Q v = φ_R ⟨φ_L, v⟩_μ
    phi_L = (Q[0].conj() / W) / phi[0].conj() if abs(phi[0]) > 1e-14 else None
    if phi_L is None:
        row = np.argmax(np.abs(phi))
        phi_L = (Q[row].conj() / W) / phi[row].conj()
    grad = np.empty(cfg.d, dtype=complex)
    for axis in range(cfg.d):
        dL = 1j * assemble_K(system, k, p, derivative=(axis,))
        grad[axis] = system.inner(phi_L, dL @ phi)
    return EigenBranch(k, p, complex(ev[i]), phi, phi_L, Q, grad, np.delete(ev, i))


def riesz_projection_contour(system: PeriodicSystem, k, p, branch: EigenBranch | None = None,
                             order: int = 16) -> np.ndarray:
    """(2πi)⁻¹∮(z - L̃)⁻¹dz over a square centred on E_p(k).

    The half-side is half the distance to the nearest other eigenvalue, so the
    square holds E alone.  Composite Gauss-Legendre panels no longer than half
    the distance from the contour to the spectrum.
    """
    k, p = _as_vec(k, system.cfg.d), _as_vec(p, system.cfg.d)
    L = assemble_L(system, k, p).matrix
    branch = branch or eigen_branch(system, k, p, L=L)
    E = branch.E
    sep = np.abs(branch.others - E).min()
    s = 0.5 * sep
    corners = [E + s * complex(1, -1), E + s * complex(1, 1), E + s * complex(-1, 1), E + s * complex(-1, -1)]
    dist = min(s, sep - s * np.sqrt(2))
    nodes, wts = np.polynomial.legendre.leggauss(order)
    n = system.dim
    I = np.eye(n)
    acc = np.zeros((n, n), dtype=complex)
    for a, b in zip(corners, corners[1:] + corners[:1]):
        panels = max(1, int(np.ceil(abs(b - a) / (0.5 * dist))))
        edges = np.linspace(0, 1, panels + 1)
        for s0, s1 in zip(edges[:-1], edges[1:]):
            for x, w in zip(nodes, wts):
                s = 0.5 * (s0 + s1) + 0.5 * (s1 - s0) * x
                z = a + s * (b - a)
                dz = (b - a) * 0.5 * (s1 - s0) * w
                acc += np.linalg.solve(z * I - L, I) * dz
    return acc / (2j * np.pi)


@dataclass
class HessianForms:
    p: np.ndarray
    reduced: np.ndarray
    gamma_form: np.ndarray
    raw_asymmetry: float  # max |G - Gᵀ| of the unsymmetrised 2 Re⟨a_i, w_j⟩
    folded_curvature: np.ndarray
    folds_to_origin: bool

    @property
    def difference(self) -> float:
        return float(np.max(np.abs(self.reduced - self.gamma_form)))


def _kdot_vectors(system: PeriodicSystem, p) -> list[np.ndarray]:
    ground = system.ground_vector()
    zero = np.zeros(system.cfg.d)
    return [assemble_K(system, zero, p, derivative=(i,)) @ ground for i in range(system.cfg.d)]


def hessian_closed_form(system: PeriodicSystem, p, check_cond: bool = True) -> HessianForms:
    """∂_i∂_j E_p(0) by the reduced resolvent, plus the Schur-complement form.

    Reduced form: solve L̃_{0,p} w_j = (1-Q₀)∂_jK̃ δ₀⊗1 on ran(1-Q₀) and take
    G_ij = 2 Re⟨∂_iK̃ δ₀⊗1, w_j⟩.  G itself is not symmetric once L̃ is
    non-normal and d > 1; the Hessian is (G + Gᵀ)/2.  Schur form:
    2 Re Σ x_i y_j conj(h(x)e^{ip·x}) h(y)e^{ip·y} [Γ_p(0)⁺]_{[x],[y]}.
    """
    cfg = system.cfg
    p = _as_vec(p, cfg.d)
    d = cfg.d
    zero = np.zeros(d)
    L = assemble_L(system, zero, p).matrix
    ground = system.ground_vector()
    W = system.weights
    n = system.dim
    # bordered system: [L φ; φ^† 0] is invertible when 0 is a simple eigenvalue
    bordered = np.zeros((n + 1, n + 1), dtype=complex)
    bordered[:n, :n] = L
    bordered[:n, n] = ground
    bordered[n, :n] = (W * ground).conj()
    if check_cond:
        cond = np.linalg.cond(bordered)
        if cond > COND_LIMIT:
            raise GapTooSmall(f"reduced resolvent condition number {cond:.3g} at p={p}")
    a = _kdot_vectors(system, p)
    w = []
    for aj in a:
        rhs = aj - ground * system.inner(ground, aj)
        sol = np.linalg.solve(bordered, np.concatenate([rhs, [0.0]]))
        w.append(sol[:n])
    G = np.array([[2 * system.inner(a[i], w[j]).real for j in range(d)] for i in range(d)])
    reduced = 0.5 * (G + G.T)

    gamma = schur_complement(system, p).matrix
    pinv = np.zeros_like(gamma)
    pinv[1:, 1:] = np.linalg.inv(gamma[1:, 1:])
    vecs = system.hopping.vectors
    amps = system.hopping.amplitudes * np.exp(1j * vecs @ p)
    idx = cfg.index(vecs)
    block = pinv[np.ix_(idx, idx)]
    S = np.einsum("ai,bj,a,b,ab->ij", vecs, vecs, amps.conj(), amps, block)
    gform = 2 * S.real
    gform = 0.5 * (gform + gform.T)

    folded = np.all(np.mod(vecs, cfg.N) == 0, axis=1)
    curv = np.zeros((d, d), dtype=complex)
    if np.any(folded):
        for i in range(d):
            for j in range(d):
                d2 = assemble_K(system, zero, p, derivative=(i, j))
                curv[i, j] = 1j * system.inner(ground, d2 @ ground)
        logger.warning("hopping vectors %s fold to the origin: E_p(k) gets the extra term %s",
                       vecs[folded].tolist(), curv.tolist())
    return HessianForms(p, reduced, gform, float(np.max(np.abs(G - G.T))), curv, bool(np.any(folded)))


@dataclass
class FDHessian:
    p: np.ndarray
    step: float
    real: np.ndarray
    imag: np.ndarray
    gradient: np.ndarray
    raw: np.ndarray


def _fd_hessian_raw(f, d: int, h: float) -> np.ndarray:
    """Central second differences of f (complex) on the ±h stencil."""
    H = np.zeros((d, d), dtype=complex)
    f0 = f(np.zeros(d))
    eye = np.eye(d)
    for i in range(d):
        H[i, i] = (f(h * eye[i]) - 2 * f0 + f(-h * eye[i])) / h**2
        for j in range(i + 1, d):
            e = eye[i] + eye[j]
            o = eye[i] - eye[j]
            H[i, j] = H[j, i] = (f(h * e) - f(h * o) - f(-h * o) + f(-h * e)) / (4 * h**2)
    return H


def hessian_fd(system: PeriodicSystem, p, step: float = 1e-3, richardson: bool = True) -> FDHessian:
    """Finite-difference Hessian and gradient of E_p at k = 0, one Richardson step."""
    d = system.cfg.d
    p = _as_vec(p, d)
    gap0 = spectrum_split(system, p, check_bound=False).delta_numeric

    def E(k):
        return eigen_branch(system, k, p, gap0=gap0).E

    def grad(h):
        eye = np.eye(d)
        return np.array([(E(h * eye[i]) - E(-h * eye[i])) / (2 * h) for i in range(d)])

    raw = _fd_hessian_raw(E, d, step)
    if richardson:
        H = (4 * raw - _fd_hessian_raw(E, d, 2 * step)) / 3
        g = (4 * grad(step) - grad(2 * step)) / 3
    else:
        H, g = raw, grad(step)
    return FDHessian(p, step, H.real, H.imag, g, raw)


@dataclass
class DiffusionProfile:
    Mp: int
    grid: np.ndarray
    D: np.ndarray
    delta_numeric: np.ndarray
    delta_bound: float
    raw_asymmetry: np.ndarray
    reduced_vs_schur: np.ndarray

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.D - np.swapaxes(self.D, 1, 2))))

    def min_eigenvalue(self) -> float:
        return float(min(np.linalg.eigvalsh(Dp).min() for Dp in self.D))

    def rows(self):
        d = self.grid.shape[1]
        for p, Dp, dn in zip(self.grid, self.D, self.delta_numeric):
            yield [*p, *Dp.reshape(-1), dn, self.delta_bound]

    def header(self) -> list[str]:
        d = self.grid.shape[1]
        return ([f"p{i}" for i in range(d)] + [f"D{i}{j}" for i in range(d) for j in range(d)]
                + ["delta_numeric", "delta_bound"])


def diffusion_at(system: PeriodicSystem, p, bound: float | None = None, check_bound: bool = True,
                 require_pd: bool = True):
    """(D(p), δ_numeric(p), asymmetry, two-form difference) at one quasi-momentum."""
    split = spectrum_split(system, p, delta_bound=bound, check_bound=check_bound)
    forms = hessian_closed_form(system, p)
    Dp = 0.5 * forms.reduced
    if require_pd and np.linalg.eigvalsh(Dp).min() <= 0:
        raise NotPositiveDefinite(f"D(p) not positive definite at p={p}: {Dp.tolist()}")
    return Dp, split.delta_numeric, forms.raw_asymmetry, forms.difference


def diffusion_profile(system: PeriodicSystem, Mp: int, check_bound: bool = True,
                      workers: int = 1) -> DiffusionProfile:
    """D(p) = ½ ∂∂E_p(0) on the uniform Mp^d grid of [0, 2π/N)^d."""
    grid = momentum_grid(system.cfg, Mp)
    bound = system_gap_bound(system)

    def one(p):
        return diffusion_at(system, p, bound, check_bound)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, grid))  # map keeps grid order
    else:
        out = [one(p) for p in grid]
    Ds, gaps, asym, diff = (np.array(col) for col in zip(*out))
    return DiffusionProfile(Mp, grid, Ds, gaps, bound, asym, diff)


def fourier_interpolate(values: np.ndarray, d: int, Mp: int, new_Mp: int) -> np.ndarray:
    """Trigonometric interpolation of samples on the periodic Mp^d grid onto new_Mp^d.

    ``values`` has shape (Mp^d, ...) in ``momentum_grid`` order.
    """
    if new_Mp % Mp:
        raise ValueError("new grid must refine the old one")
    tail = values.shape[1:]
    arr = values.reshape((Mp,) * d + tail)
    spec = np.fft.fftn(arr, axes=tuple(range(d)))
    out = np.zeros((new_Mp,) * d + tail, dtype=complex)
    half = Mp // 2
    for idx in np.ndindex(*(Mp,) * d):
        coeff = spec[idx]
        freq = [i if i < half else i - Mp for i in idx]
        weight = 1.0
        for f in freq:
            if Mp % 2 == 0 and abs(f) == half:
                weight *= 0.5  # split Nyquist mode symmetrically
        targets = [[f] if not (Mp % 2 == 0 and abs(f) == half) else [half, -half] for f in freq]
        for combo in np.ndindex(*[len(t) for t in targets]):
            tgt = tuple(targets[a][combo[a]] % new_Mp for a in range(d))
            out[tgt] += weight * coeff
    res = np.fft.ifftn(out, axes=tuple(range(d))) * (new_Mp / Mp) ** d
    return res.real.reshape((new_Mp**d,) + tail)


def continuity_residual(system: PeriodicSystem, Mp: int) -> float:
    """max |D_fine - interp(D_coarse)| between the Mp and 2Mp grids."""
    coarse = diffusion_profile(system, Mp)
    fine = diffusion_profile(system, 2 * Mp)
    interp = fourier_interpolate(coarse.D, system.cfg.d, Mp, 2 * Mp)
    return float(np.max(np.abs(interp - fine.D)))


def deflated_semigroup(system: PeriodicSystem, L: np.ndarray, branch: EigenBranch, t: float) -> np.ndarray:
    """e^{-tL}(1-Q), computed as e^{-t(L+λQ)}(1-Q) so that it stays accurate when tiny."""
    lam = np.linalg.norm(L, 1) + 1.0
    n = L.shape[0]
    return sla.expm(-t * (L + lam * branch.Q)) @ (np.eye(n) - branch.Q)


@dataclass
class FibreSplit:
    E: complex
    leading: complex
    remainder: complex
    remainder_norm: float


def fibre_split(system: PeriodicSystem, k, p, t: float, vec: np.ndarray, gap0: float | None = None) -> FibreSplit:
    """Split ⟨δ₀⊗1, e^{-tL̃}vec⊗1⟩ into the slow-branch term and the rest.

    leading = e^{-tE}⟨δ₀⊗1, Q vec⊗1⟩ and remainder = ⟨δ₀⊗1, e^{-tL̃}(1-Q) vec⊗1⟩,
    the latter through the deflated exponential.  ``remainder_norm`` bounds
    |remainder| by ‖e^{-tL̃}(1-Q)‖·‖vec⊗1‖.
    """
    d = system.cfg.d
    k, p = _as_vec(k, d), _as_vec(p, d)
    L = assemble_L(system, k, p).matrix
    branch = eigen_branch(system, k, p, gap0=gap0, L=L)
    ground = system.ground_vector()
    v = lift(vec, system.M)
    lead = np.exp(-t * branch.E) * system.inner(ground, branch.Q @ v)
    R = deflated_semigroup(system, L, branch, t)
    rem = system.inner(ground, R @ v)
    return FibreSplit(branch.E, complex(lead), complex(rem), system.op_norm(R) * system.norm(v))


@dataclass
class DecayFit:
    k: np.ndarray
    p: np.ndarray
    times: np.ndarray
    norms: np.ndarray
    rate: float
    delta_numeric: float
    eps: float

    @property
    def ok(self) -> bool:
        return self.rate >= self.delta_numeric - self.eps


def fit_decay_rate(times, values) -> float:
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    if np.any(values <= 0) or np.any(np.diff(values) >= 0):
        raise FitUnstable(f"values {values.tolist()} are not strictly decreasing and positive")
    slope = np.polyfit(times, np.log(values), 1)[0]
    return float(-slope)


def decay_rate_check(system: PeriodicSystem, k, p, times=(2.0, 4.0, 8.0), eps_frac: float = 0.05) -> DecayFit:
    """Fit the exponential decay rate of ‖e^{-tL̃}(1-Q)‖ over the tail of ``times``."""
    d = system.cfg.d
    k, p = _as_vec(k, d), _as_vec(p, d)
    gap = spectrum_split(system, p, check_bound=False).delta_numeric
    L = assemble_L(system, k, p).matrix
    branch = eigen_branch(system, k, p, gap0=gap, L=L)
    times = np.asarray(times, float)
    norms = np.array([system.op_norm(deflated_semigroup(system, L, branch, t)) for t in times])
    tail = slice(1, None) if len(times) > 2 else slice(None)
    rate = fit_decay_rate(times[tail], norms[tail])
    fit = DecayFit(k, p, times, norms, rate, gap, eps_frac * gap)
    logger.debug("decay fit at k=%s p=%s: rate %.4g vs gap %.4g", k, p, rate, gap)
    return fit


def numerical_range_sample(system: PeriodicSystem, k, p, n: int = 1000, seed: int = 0) -> np.ndarray:
    """⟨Ψ, L̃Ψ⟩ for ``n`` random μ-unit vectors Ψ."""
    L = assemble_L(system, k, p).matrix
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, system.dim)) + 1j * rng.standard_normal((n, system.dim))
    Z /= np.sqrt(np.sum(system.weights * np.abs(Z) ** 2, axis=1))[:, None]
    return np.einsum("ni,i,ni->n", Z.conj(), system.weights, Z @ L.T)


def tracking_radius(system: PeriodicSystem, p, direction, k_max: float = 2.0, steps: int = 200) -> float:
    """Largest |k| along ``direction`` before the branch stops being isolated."""
    d = system.cfg.d
    p = _as_vec(p, d)
    u = _as_vec(direction, d)
    u = u / np.linalg.norm(u)
    gap0 = spectrum_split(system, p, check_bound=False).delta_numeric
    last = 0.0
    for s in np.linspace(0, k_max, steps + 1)[1:]:
        try:
            eigen_branch(system, s * u, p, gap0=gap0)
        except BranchCollision:
            return last
        last = s
    return last
