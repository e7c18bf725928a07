"""Config-driven experiments: assumption checks, Monte Carlo, exact route,
diffusion profiles and the scaling-limit verification.

Every run is a pure function of (config, seed); output tables are CSV with
17 significant digits and a JSON manifest next to them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .augmented import (
    exact_fourier_density,
    initial_profile_m,
    integrate_fibres,
    momentum_grid,
    transform_initial,
)
from .dynamics import SimulationBox, WaveState, ensemble_mean_density, fourier_diagonal
from .errors import AssumptionViolation, BranchCollision, ConfigError, QuadratureNotConverged
from .lattice import CellFunction, DensityMatrixInit, HoppingKernel, LatticeConfig, check_no_smaller_period
from .markov import (
    AssumptionReport,
    MarkovModel,
    PotentialAssignment,
    build_cyclic_walk,
    jiggling_potential,
    verify_assumptions,
)
from .spectral import (
    diffusion_at,
    diffusion_profile,
    fibre_split,
    fit_decay_rate,
    fourier_interpolate,
    gap_lower_bound,
)
from .system import PeriodicSystem

logger = logging.getLogger(__name__)

DEFAULT_TAU = (16, 64, 256, 1024)


def _complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ConfigError(f"complex number must be [re, im], got {v!r}")
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    return complex(v)


def _site(x, d: int) -> tuple[int, ...]:
    x = [x] if np.ndim(x) == 0 else list(x)
    if len(x) != d:
        raise ConfigError(f"site {x!r} does not have {d} coordinates")
    return tuple(int(c) for c in x)


def _momenta(ks, d: int) -> list[np.ndarray]:
    out = []
    for k in ks:
        k = np.atleast_1d(np.asarray(k, dtype=float))
        if k.shape != (d,):
            raise ConfigError(f"momentum {k.tolist()} does not have {d} components")
        out.append(k)
    return out


@dataclass
class ExperimentConfig:
    name: str
    d: int
    N: int
    hopping: dict
    potential: dict
    markov: dict
    initial: dict
    k: list = field(default_factory=list)
    t: float = 1.0
    samples: int = 1000
    seed: int = 0
    verify: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            lat = data["lattice"]
            cfg = cls(
                name=str(data.get("name", "experiment")),
                d=int(lat["d"]),
                N=int(lat["N"]),
                hopping=data["hopping"],
                potential=data["potential"],
                markov=data.get("markov", {"kind": "cyclic_walk", "rate": 1.0}),
                initial=data.get("initial", {"psi": [[[0] * int(lat["d"]), 1.0]]}),
                k=data.get("k", []),
                t=float(data.get("t", 1.0)),
                samples=int(data.get("samples", 1000)),
                seed=int(data.get("seed", 0)),
                verify=data.get("verify", {}),
                grids=data.get("grids", {}),
                tolerances=data.get("tolerances", {}),
                raw=data,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed config: {e!r}") from e
        cfg.k = _momenta(cfg.k, cfg.d)
        return cfg

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def Mp(self) -> int:
        return int(self.grids.get("Mp", 16))

    @property
    def profile_Mp(self) -> int:
        return int(self.grids.get("profile", 64 if self.d == 1 else 8))

    @property
    def max_points(self) -> int:
        return int(self.grids.get("max_points", 1024))

    def tol(self, key: str, default: float) -> float:
        return float(self.tolerances.get(key, default))

    # -- model construction -------------------------------------------------

    def lattice(self) -> LatticeConfig:
        return LatticeConfig(self.d, self.N)

    def hopping_kernel(self) -> HoppingKernel:
        entries = {}
        items = self.hopping.items() if isinstance(self.hopping, dict) else self.hopping
        for x, a in items:
            x = json.loads(x) if isinstance(x, str) else x
            site = _site(x, self.d)
            entries[site] = entries.get(site, 0) + _complex(a)
        return HoppingKernel(entries)

    def cell_function(self) -> CellFunction | None:
        if "U" not in self.potential:
            return None
        return CellFunction(self.lattice(), np.asarray(self.potential["U"], dtype=float))

    def markov_model(self) -> MarkovModel:
        mk = self.markov
        kind = mk.get("kind", "cyclic_walk")
        lat = self.lattice()
        if kind == "cyclic_walk":
            return build_cyclic_walk(lat, float(mk.get("rate", 1.0)))
        if kind == "explicit":
            mu = mk.get("mu")
            return MarkovModel(lat, np.asarray(mk["rates"], dtype=float),
                               np.asarray(mk["generators"], dtype=int),
                               None if mu is None else np.asarray(mu, dtype=float))
        raise ConfigError(f"unknown markov kind {kind!r}")

    def system(self) -> PeriodicSystem:
        lat = self.lattice()
        model = self.markov_model()
        pot = self.potential
        try:
            if "U" in pot:
                potential = jiggling_potential(self.cell_function(), model)
            elif "v0" in pot:
                potential = PotentialAssignment.from_v0(np.asarray(pot["v0"], dtype=float), model)
            elif "table" in pot:
                potential = PotentialAssignment(np.asarray(pot["table"], dtype=float))
            else:
                raise ConfigError("potential needs one of U, v0, table")
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return PeriodicSystem(lat, self.hopping_kernel(), model, potential)

    def initial_state(self) -> DensityMatrixInit:
        ini = self.initial
        if "psi" in ini:
            return DensityMatrixInit.pure({_site(x, self.d): _complex(a) for x, a in ini["psi"]})
        if "mixture" in ini:
            return DensityMatrixInit.mixture(
                [(float(w), {_site(x, self.d): _complex(a) for x, a in psi}) for w, psi in ini["mixture"]])
        if "rho" in ini:
            entries = {}
            for x, y, v in ini["rho"]:
                key = (_site(x, self.d), _site(y, self.d))
                entries[key] = entries.get(key, 0) + _complex(v)
            return DensityMatrixInit(entries)
        raise ConfigError("initial state needs one of psi, mixture, rho")


def bundled_configs() -> list[str]:
    root = resources.files("qdiff") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(source) -> ExperimentConfig:
    """Load from a path, a bundled config name, or an already parsed dict."""
    if isinstance(source, dict):
        return ExperimentConfig.from_dict(source)
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("qdiff") / "configs" / f"{source}.json"
        if not res.is_file():
            raise ConfigError(f"no config file {source!r} and no bundled config of that name "
                              f"(bundled: {', '.join(bundled_configs())})")
        text = res.read_text()
    try:
        return ExperimentConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: {e}") from e


# -- output -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_manifest(out: Path, config: ExperimentConfig, command: str, seed: int | None, summary: dict) -> Path:
    manifest = {
        "command": command,
        "config": config.name,
        "config_sha256": config.digest,
        "seed": seed,
        "versions": {
            "qdiff": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "summary": summary,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_fmt) + "\n")
    return path


# -- assumptions ------------------------------------------------------------

def run_assumptions(config: ExperimentConfig) -> AssumptionReport:
    system = config.system()
    report = verify_assumptions(system)
    U = config.cell_function()
    if U is not None and not check_no_smaller_period(U):
        report.add("SmallerPeriod", "Assumption 4", "U is invariant under a shift by some x in Λ \\ {0}")
    c = report.constants
    if report.ok:
        c["delta_bound"] = gap_lower_bound(c["gamma"], c["T"], c["chi"], c["h_sup"], c["V_norm"])
    return report


def require_assumptions(config: ExperimentConfig) -> PeriodicSystem:
    report = run_assumptions(config)
    if not report.ok:
        raise AssumptionViolation("; ".join(str(v) for v in report.violations))
    return config.system()


# -- simulation and exact route ---------------------------------------------

@dataclass
class SimulationResult:
    density: object
    rows: list = field(default_factory=list)  # k..., mc_re, mc_im, stderr[, exact_re, exact_im, z]
    max_z: float | None = None


def run_simulate(config: ExperimentConfig, seed: int | None = None, cross_check: bool = False,
                 workers: int = 1) -> SimulationResult:
    system = require_assumptions(config)
    seed = config.seed if seed is None else seed
    rho0 = config.initial_state()
    states = rho0.eigenstates()
    if len(states) != 1:
        raise ConfigError("Monte Carlo runs need a pure initial state")
    amps = states[0][1]
    radius = max(np.max(np.abs(x)) for x in amps)
    box = SimulationBox.for_evolution(system, config.t, support_radius=int(radius))
    psi0 = WaveState.from_amplitudes(box, amps)
    dens = ensemble_mean_density(psi0, system, config.t, config.samples, seed, workers=workers)
    res = SimulationResult(dens)
    zs = []
    for k in config.k:
        val, err = fourier_diagonal(dens, k)
        row = [*k, val.real, val.imag, err]
        if cross_check:
            ex = exact_fourier_density(system, rho0, k, config.t, Mp=config.Mp,
                                       tol=config.tol("quadrature", 1e-10), max_points=config.max_points)
            z = abs(val - ex) / err if err > 0 else (0.0 if val == ex else np.inf)
            zs.append(z)
            row += [ex.real, ex.imag, z]
        res.rows.append(row)
    if zs:
        res.max_z = float(max(zs))
    return res


def run_exact(config: ExperimentConfig) -> list:
    """Rows (k..., re, im, quadrature error, points per axis) at time config.t."""
    system = require_assumptions(config)
    rho0 = config.initial_state()
    rows = []
    for k in config.k:
        r = exact_fourier_density(system, rho0, k, config.t, Mp=config.Mp,
                                  tol=config.tol("quadrature", 1e-10), max_points=config.max_points,
                                  detail=True)
        rows.append([*k, r.value.real, r.value.imag, r.error, r.points])
    return rows


# -- diffusion profile ------------------------------------------------------

@dataclass
class DiffusionSummary:
    profile: object
    min_eigenvalue: float
    delta_numeric_min: float
    delta_bound: float
    asymmetry: float
    raw_asymmetry: float
    form_difference: float
    continuity_residual: float | None


def run_diffusion(config: ExperimentConfig, workers: int = 1, continuity: bool = True) -> DiffusionSummary:
    system = require_assumptions(config)
    Mp = config.profile_Mp
    prof = diffusion_profile(system, Mp, workers=workers)
    resid = None
    if continuity:
        fine = diffusion_profile(system, 2 * Mp, workers=workers)
        interp = fourier_interpolate(prof.D, system.cfg.d, Mp, 2 * Mp)
        resid = float(np.max(np.abs(interp - fine.D)))
    return DiffusionSummary(prof, prof.min_eigenvalue(), float(prof.delta_numeric.min()), prof.delta_bound,
                            prof.asymmetry(), float(prof.raw_asymmetry.max()),
                            float(prof.reduced_vs_schur.max()), resid)


# -- scaling limit ----------------------------------------------------------

@dataclass
class ScalingRow:
    tau: float
    k: np.ndarray
    lhs: complex
    rhs: complex
    leading: complex
    remainder: complex
    remainder_bound: float
    taylor_err: float

    @property
    def err(self) -> float:
        return abs(self.lhs - self.rhs)


@dataclass
class ScalingReport:
    t: float
    rows: list
    rhs_check: dict
    delta_numeric: float
    remainder_rates: dict

    HEADER = ["tau", "k", "lhs_re", "lhs_im", "rhs_re", "rhs_im", "err", "leading_re", "leading_im",
              "remainder_abs", "remainder_bound", "taylor_err"]

    def table(self):
        for r in self.rows:
            yield [r.tau, " ".join(f"{c:.17g}" for c in r.k), r.lhs.real, r.lhs.imag, r.rhs.real,
                   r.rhs.imag, r.err, r.leading.real, r.leading.imag, abs(r.remainder),
                   r.remainder_bound, r.taylor_err]

    def errors(self, k) -> list[float]:
        k = np.asarray(k, float)
        return [r.err for r in self.rows if np.allclose(r.k, k)]

    def strictly_decreasing(self, k) -> bool:
        e = self.errors(k)
        return all(b < a for a, b in zip(e, e[1:]))

    def rate_ok(self, k, eps_frac: float = 0.05) -> bool:
        return self.remainder_rates[tuple(np.asarray(k, float))] >= (1 - eps_frac) * self.delta_numeric


class _FibreCache:
    """Memoised per-p quantities shared by the RHS and the row diagnostics."""

    def __init__(self, system: PeriodicSystem, rho0: DensityMatrixInit):
        self.system, self.rho0 = system, rho0
        self._d: dict = {}

    def D(self, p) -> tuple[np.ndarray, float]:
        key = tuple(np.round(p, 15))
        if key not in self._d:
            Dp, gap, _, _ = diffusion_at(self.system, p, check_bound=False, require_pd=False)
            self._d[key] = (Dp, gap)
        return self._d[key]


def run_verify_scaling(config: ExperimentConfig, taus=None, ks=None, t: float | None = None) -> ScalingReport:
    """Compare Σ_x e^{-iκ·x}Eρ_{τt}(x,x), κ = k/√τ, with ∫ e^{-t kᵀD(p)k} m(p) dp."""
    system = require_assumptions(config)
    cfg = system.cfg
    rho0 = config.initial_state()
    v = config.verify
    taus = [float(x) for x in (taus or v.get("tau", DEFAULT_TAU))]
    ks = _momenta(ks if ks is not None else v.get("k", [[1.0] * cfg.d]), cfg.d)
    t = float(t if t is not None else v.get("t", 1.0))
    Mp = config.Mp
    qtol = config.tol("quadrature", 1e-10)
    rhs_tol = config.tol("rhs", 1e-8)
    max_pts = int(config.grids.get("max_points_remainder", config.max_points))
    cache = _FibreCache(system, rho0)
    cell = (2 * np.pi / cfg.N) ** cfg.d  # integrate_fibres returns the mean over T_N

    rows, rhs_check, rates = [], {}, {}
    for k in ks:
        def rhs_integrand(ps, k=k):
            out = np.empty(len(ps), dtype=complex)
            for i, p in enumerate(ps):
                Dp, _ = cache.D(p)
                out[i] = np.exp(-t * k @ Dp @ k) * initial_profile_m(rho0, p, cfg) * cell
            return out

        rhs = integrate_fibres(cfg, rhs_integrand, Mp, rhs_tol, config.max_points)
        rhs_check[tuple(k)] = rhs.error
        for tau in taus:
            kappa = k / np.sqrt(tau)
            T = tau * t
            lhs = exact_fourier_density(system, rho0, kappa, T, Mp=Mp, tol=qtol, max_points=config.max_points)
            splits: dict = {}

            def split(p, kappa=kappa, T=T, splits=splits):
                key = tuple(np.round(p, 15))
                if key not in splits:
                    gap = cache.D(p)[1]
                    vec = transform_initial(rho0, -kappa, p, cfg)
                    splits[key] = fibre_split(system, -kappa, p, T, vec, gap0=gap)
                return splits[key]

            def field_integrand(name):
                return lambda ps: np.array([getattr(split(p), name) for p in ps], dtype=complex)

            try:
                leading = integrate_fibres(cfg, field_integrand("leading"), Mp, qtol, config.max_points).value
                remainder = integrate_fibres(cfg, field_integrand("remainder"), Mp, 1e-6, max_pts, rel=True).value
                bound = integrate_fibres(cfg, field_integrand("remainder_norm"), Mp, 1e-6, max_pts,
                                         rel=True).value.real
                taylor = 0.0
                for key, s in splits.items():
                    Dp, _ = cache.D(np.array(key))
                    taylor = max(taylor, abs(np.exp(-T * s.E) - np.exp(-t * k @ Dp @ k)))
            except (BranchCollision, QuadratureNotConverged) as e:
                # κ outside the tracking radius or remainder unresolved: keep LHS, drop the split
                logger.warning("tau=%g k=%s: no branch split (%s)", tau, k, e)
                leading = remainder = complex(np.nan, np.nan)
                bound = taylor = np.nan
            rows.append(ScalingRow(tau, k, lhs, rhs.value, leading, remainder, bound, taylor))
            logger.info("tau=%g k=%s: |LHS-RHS|=%.3g remainder=%.3g", tau, k, abs(lhs - rhs.value), abs(remainder))
        sel = [r for r in rows if np.allclose(r.k, k) and np.isfinite(r.remainder)]
        times = np.array([r.tau * t for r in sel])
        vals = np.array([abs(r.remainder) for r in sel])
        tail = slice(1, None) if len(sel) > 2 else slice(None)
        rates[tuple(k)] = fit_decay_rate(times[tail], vals[tail]) if len(sel) >= 2 else np.nan
    grid_gaps = [cache.D(p)[1] for p in momentum_grid(cfg, config.profile_Mp)]
    return ScalingReport(t, rows, rhs_check, float(min(grid_gaps)), rates)


__all__ = [
    "ExperimentConfig",
    "ScalingReport",
    "load_config",
    "run_assumptions",
    "run_diffusion",
    "run_exact",
    "run_simulate",
    "run_verify_scaling",
    "write_csv",
    "write_manifest",
]
