"""Finite-state Markov drivers for the fluctuating potential.

Conventions
-----------
* ``rates`` is the forward rate matrix Q: off-diagonal jump rates, rows sum to 0.
* Functions on Ω are vectors of values; the inner product is the μ-weighted one.
* The backward generator is B = -Q*, with Q* the adjoint of Q in L²(Ω, μ).
* The shift action is given by d commuting permutations ``generators[i] = σ_{e_i}``;
  σ_x = σ_{e_1}^{x_1} ∘ ... ∘ σ_{e_d}^{x_d}.
* For the jiggling walk on Λ we use σ_x(ω) = [ω - x]_N together with
  v_x(ω) = U([x - ω]_N), which makes v_x = v_0 ∘ σ_x hold exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse.csgraph import connected_components

from .errors import (
    AssumptionViolation,
    DegeneratePotential,
    NotErgodic,
)
from .lattice import CellFunction, LatticeConfig

logger = logging.getLogger(__name__)

ASSUMPTION_TOL = 1e-10


def _perm_power(perm: np.ndarray, n: int) -> np.ndarray:
    out = np.arange(perm.size)
    base = perm if n >= 0 else np.argsort(perm)
    for _ in range(abs(n)):
        out = base[out]
    return out


def _perm_order(perm: np.ndarray) -> int:
    seen = np.zeros(perm.size, bool)
    order = 1
    for start in range(perm.size):
        if seen[start]:
            continue
        length, j = 0, start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        order = np.lcm(order, length)
    return int(order)


def stationary_distribution(rates: np.ndarray) -> np.ndarray:
    ns = sla.null_space(rates.T)
    if ns.shape[1] != 1:
        raise NotErgodic(f"rate matrix has {ns.shape[1]} invariant measures")
    mu = np.real(ns[:, 0])
    return mu / mu.sum()


@dataclass(frozen=True)
class MarkovModel:
    cfg: LatticeConfig
    rates: np.ndarray
    generators: np.ndarray
    mu: np.ndarray = None

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise ValueError("rate matrix must be square")
        gens = np.asarray(self.generators, dtype=int).reshape(self.cfg.d, rates.shape[0])
        for g in gens:
            if sorted(g) != list(range(rates.shape[0])):
                raise ValueError(f"shift generator {g.tolist()} is not a permutation")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "generators", gens)
        mu = stationary_distribution(rates) if self.mu is None else np.asarray(self.mu, float)
        object.__setattr__(self, "mu", mu)

    @property
    def M(self) -> int:
        return self.rates.shape[0]

    def shift(self, x) -> np.ndarray:
        """σ_x as a permutation array: ``shift(x)[ω] = σ_x(ω)`` for any x ∈ Z^d."""
        x = np.atleast_1d(np.asarray(x, dtype=int))
        out = np.arange(self.M)
        for g, n in zip(self.generators, x):
            out = _perm_power(g, int(n) % _perm_order(g))[out]
        return out

    @cached_property
    def shift_table(self) -> np.ndarray:
        """(N^d, M) table of σ_x over x ∈ Λ."""
        return np.array([self.shift(x) for x in self.cfg.sites()])

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)


def build_cyclic_walk(cfg: LatticeConfig, rate: float) -> MarkovModel:
    """Continuous-time walk on Λ with periodic boundaries and total jump rate ``rate``."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    sites = cfg.sites()
    M = cfg.cell_size
    Q = np.zeros((M, M))
    for w, s in enumerate(sites):
        for i in range(cfg.d):
            for step in (1, -1):
                t = s.copy()
                t[i] += step
                Q[w, cfg.index(t)] += rate / (2 * cfg.d)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    gens = []
    for i in range(cfg.d):
        e = np.zeros(cfg.d, int)
        e[i] = 1
        gens.append(cfg.index(sites - e))
    return MarkovModel(cfg, Q, np.array(gens), mu=np.full(M, 1.0 / M))


@dataclass(frozen=True)
class BackwardGenerator:
    matrix: np.ndarray
    mu: np.ndarray
    gamma: float
    invT: float

    @property
    def T(self) -> float:
        return 1.0 / self.invT

    def inner(self, f, g) -> complex:
        return complex(np.vdot(f, self.mu * np.asarray(g)))

    def norm(self, f) -> float:
        return float(np.sqrt(np.sum(self.mu * np.abs(f) ** 2)))

    def solve_mean_zero(self, f) -> np.ndarray:
        """B⁻¹f for μ-mean-zero f, normalised to a μ-mean-zero answer."""
        f = np.asarray(f, dtype=complex)
        if abs(np.sum(self.mu * f)) > 1e-10 * max(1.0, np.max(np.abs(f))):
            raise ValueError("B^-1 is only defined on mean-zero functions")
        A = np.vstack([self.matrix, self.mu[None, :]])
        g, *_ = np.linalg.lstsq(A, np.concatenate([f, [0.0]]), rcond=None)
        return g


def _symmetrized(model: MarkovModel, B: np.ndarray) -> np.ndarray:
    s = np.sqrt(model.mu)
    return (s[:, None] * B) / s[None, :]


def backward_generator(model: MarkovModel, tol: float = ASSUMPTION_TOL) -> BackwardGenerator:
    mu = model.mu
    Qstar = (model.rates.T * mu[None, :]) / mu[:, None]
    B = -Qstar
    Bs = _symmetrized(model, B)  # B in an L²(μ)-orthonormal basis
    ReB = 0.5 * (Bs + Bs.conj().T)
    ImB = (Bs - Bs.conj().T) / 2j
    P = sla.null_space(np.sqrt(mu)[None, :])  # orthonormal basis of (√μ)^⊥
    ReP = P.T @ ReB @ P
    lam, vec = np.linalg.eigh(ReP)
    invT = float(lam.min())
    if invT <= tol:
        raise NotErgodic(f"spectral gap {invT:.3g} of Re B is not positive")
    inv_sqrt = vec @ np.diag(lam**-0.5) @ vec.T
    S = inv_sqrt @ (P.T @ ImB @ P) @ inv_sqrt
    gamma = float(np.linalg.norm(S, 2)) if S.size else 0.0
    if gamma < 1e-12:
        gamma = 0.0
    return BackwardGenerator(B, mu, gamma, invT)


@dataclass(frozen=True)
class PotentialAssignment:
    """v_x(ω) stored as an (N^d, M) table indexed by (x ∈ Λ, ω)."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

    @classmethod
    def from_v0(cls, v0, model: MarkovModel) -> "PotentialAssignment":
        v0 = np.asarray(v0, dtype=float)
        return cls(np.array([v0[s] for s in model.shift_table]))

    @property
    def v0(self) -> np.ndarray:
        return self.table[0]

    def fluctuation(self) -> np.ndarray:
        """v_x(ω) - v_0(ω), the diagonal of the augmented potential."""
        return self.table - self.table[0][None, :]

    def fluctuation_norm(self) -> float:
        return float(np.max(np.abs(self.fluctuation())))

    def covariance_residual(self, model: MarkovModel) -> float:
        return float(np.max(np.abs(self.table - self.v0[model.shift_table])))


def jiggling_potential(U: CellFunction, model: MarkovModel) -> PotentialAssignment:
    """v_x(ω) = U([x - ω]_N) for a walk whose state space is Λ itself."""
    cfg = U.cfg
    if model.M != cfg.cell_size:
        raise ValueError("jiggling potential needs Ω = Λ")
    sites = cfg.sites()
    table = np.array([[U.at(x - w) for w in sites] for x in sites])
    return PotentialAssignment(table)


def chi_constant(model: MarkovModel, B: BackwardGenerator, v: PotentialAssignment) -> float:
    """min over x ≠ y in Λ of ‖B⁻¹(v_x - v_y)‖ in L²(μ)."""
    table = v.table
    scale = max(1.0, float(np.max(np.abs(table))))
    best = np.inf
    n = table.shape[0]
    for x in range(n):
        for y in range(x + 1, n):
            f = table[x] - table[y]
            if np.max(np.abs(f)) <= 1e-14 * scale:
                raise DegeneratePotential(f"v_x == v_y for cell sites {x} and {y}")
            best = min(best, B.norm(B.solve_mean_zero(f)))
    if n == 1:
        raise DegeneratePotential("cell has a single site")
    return float(best)


@dataclass(frozen=True)
class PotentialPath:
    """Right-continuous piecewise-constant path: ``states[i]`` holds on [jump_times[i], jump_times[i+1])."""

    jump_times: np.ndarray
    states: np.ndarray
    T_max: float

    def state_at(self, t: float) -> int:
        i = np.searchsorted(self.jump_times, t, side="right") - 1
        return int(self.states[i])

    def intervals(self, t: float):
        """(state, duration) pieces covering [0, t]; jumps after t are ignored."""
        if t > self.T_max + 1e-12:
            raise ValueError(f"path only sampled up to {self.T_max}, asked for {t}")
        ends = np.append(self.jump_times[1:], np.inf)
        for start, end, w in zip(self.jump_times, ends, self.states):
            if start >= t:
                break
            yield int(w), min(end, t) - start

    def shifted(self, perm: np.ndarray) -> "PotentialPath":
        return PotentialPath(self.jump_times, perm[self.states], self.T_max)


def sample_path(model: MarkovModel, T_max: float, seed) -> PotentialPath:
    """Gillespie sample on [0, T_max] with ω(0) ~ μ.

    ``seed`` is anything accepted by ``numpy.random.default_rng``.
    """
    if T_max <= 0:
        raise ValueError("T_max must be positive")
    rng = np.random.default_rng(seed)
    Q = model.rates
    w = int(rng.choice(model.M, p=model.mu))
    times, states = [0.0], [w]
    t = 0.0
    while True:
        out = -Q[w, w]
        if out <= 0:
            break
        t += rng.exponential(1.0 / out)
        if t > T_max:
            break
        p = np.clip(Q[w], 0, None)
        p[w] = 0.0
        w = int(rng.choice(model.M, p=p / p.sum()))
        times.append(t)
        states.append(w)
    return PotentialPath(np.array(times), np.array(states, dtype=int), float(T_max))


@dataclass
class Violation:
    code: str
    assumption: str
    message: str

    def __str__(self):
        return f"[{self.assumption}] {self.code}: {self.message}"


@dataclass
class AssumptionReport:
    violations: list[Violation] = field(default_factory=list)
    constants: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def add(self, code, assumption, message):
        self.violations.append(Violation(code, assumption, message))


def check_markov_model(model: MarkovModel, report: AssumptionReport, tol: float = ASSUMPTION_TOL):
    """Assumption 1 and the periodicity half of Assumption 4, appended to ``report``."""
    Q, mu = model.rates, model.mu
    offdiag = Q - np.diag(np.diag(Q))
    if np.any(offdiag < -tol) or np.max(np.abs(Q.sum(axis=1))) > tol:
        report.add("InvalidRates", "Assumption 1", "rates must be non-negative with zero row sums")
    if np.any(mu <= 0) or abs(mu.sum() - 1) > tol:
        report.add("InvariantMeasure", "Assumption 1", "mu must be a strictly positive probability vector")
    if np.max(np.abs(mu @ Q)) > tol:
        report.add("InvariantMeasure", "Assumption 1", f"mu Q != 0 (residual {np.max(np.abs(mu @ Q)):.3g})")
    ncomp, _ = connected_components(offdiag > tol, directed=True, connection="strong")
    if ncomp != 1:
        report.add("NotErgodic", "Assumption 1", f"rate graph has {ncomp} strongly connected components")
    gens = model.generators
    for i, g in enumerate(gens):
        if np.max(np.abs(mu[g] - mu)) > tol:
            report.add("ShiftNotMeasurePreserving", "Assumption 1", f"sigma_e{i} does not preserve mu")
        if np.max(np.abs(Q[np.ix_(g, g)] - Q)) > tol:
            report.add("ShiftLawInvariance", "Assumption 1", f"Q(sigma_e{i} a, sigma_e{i} b) != Q(a, b)")
        for j in range(i + 1, len(gens)):
            if np.any(g[gens[j]] != gens[j][g]):
                report.add("ShiftNotGroupAction", "Assumption 1", f"sigma_e{i} and sigma_e{j} do not commute")
        if np.any(_perm_power(g, model.cfg.N) != np.arange(model.M)):
            report.add("ShiftPeriod", "Assumption 4", f"sigma_(N e{i}) != Id")


def verify_assumptions(system, tol: float = ASSUMPTION_TOL) -> AssumptionReport:
    """Run every hypothesis check on a ``PeriodicSystem`` and collect the constants."""
    from .lattice import validate_hopping

    report = AssumptionReport()
    model, v, cfg = system.model, system.potential, system.cfg
    hop = validate_hopping(system.hopping, cfg.d, raise_on_error=False)
    for e in hop.errors:
        report.add(e.code, "Assumption 3", str(e))
    report.constants["h_sup"] = hop.sup_bound
    report.constants["h_sup_sampled"] = hop.sup_sampled

    check_markov_model(model, report, tol)

    if v.table.shape != (cfg.cell_size, model.M):
        report.add("PotentialShape", "Assumption 3", f"potential table has shape {v.table.shape}")
        return report
    cov = v.covariance_residual(model)
    if cov > tol * max(1.0, np.max(np.abs(v.table))):
        report.add("Covariance", "Assumption 3", f"v_x != v_0 o sigma_x (residual {cov:.3g})")
    fl = np.max(np.abs(v.fluctuation()), axis=1)
    if np.any(fl[1:] == 0):
        bad = [tuple(int(c) for c in s) for s in cfg.sites()[1:][fl[1:] == 0]]
        report.add("DegeneratePotential", "Assumption 4", f"v_x == v_0 for x in {bad}")
    report.constants["V_norm"] = v.fluctuation_norm()

    try:
        B = backward_generator(model, tol)
    except AssumptionViolation as e:
        report.add(e.code, "Assumption 2", str(e))
        return report
    report.constants["gamma"] = B.gamma
    report.constants["invT"] = B.invT
    report.constants["T"] = B.T
    # χ needs mean-zero differences, which only covariance guarantees
    if not {"DegeneratePotential", "Covariance"} & set(report.codes()):
        try:
            report.constants["chi"] = chi_constant(model, B, v)
        except AssumptionViolation as e:
            report.add(e.code, "Assumption 4", str(e))
    return report
