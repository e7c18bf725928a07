"""Command line entry point: ``qdiff assumptions|simulate|exact|diffusion|verify``.

Exit status is 0 on success, 1 when a model assumption fails, 2 when a
numerical tolerance is not met (or the config cannot be used).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import AssumptionViolation, ConfigError, NumericalError
from . import harness

EXIT_OK, EXIT_ASSUMPTION, EXIT_NUMERICAL = 0, 1, 2


def _kcols(d: int) -> list[str]:
    return [f"k{i}" for i in range(d)]


def cmd_assumptions(cfg, args) -> int:
    report = harness.run_assumptions(cfg)
    for name, val in report.constants.items():
        print(f"{name:>14} = {val:.10g}")
    if report.ok:
        print("all assumptions hold")
        harness.write_manifest(args.out, cfg, "assumptions", None,
                               {"ok": True, "constants": report.constants})
        return EXIT_OK
    for v in report.violations:
        print(f"VIOLATION {v}")
    harness.write_manifest(args.out, cfg, "assumptions", None,
                           {"ok": False, "violations": report.codes(), "constants": report.constants})
    return EXIT_ASSUMPTION


def cmd_simulate(cfg, args) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    res = harness.run_simulate(cfg, seed=seed, cross_check=args.cross_check, workers=args.workers)
    dens = res.density
    harness.write_csv(args.out / "density.csv",
                      [f"x{i}" for i in range(cfg.d)] + ["mean", "stderr"],
                      ([*x, m, s] for x, m, s in zip(dens.box.sites(), dens.mean, dens.stderr)))
    header = _kcols(cfg.d) + ["mc_re", "mc_im", "stderr"]
    if args.cross_check:
        header += ["exact_re", "exact_im", "z"]
    harness.write_csv(args.out / "fourier.csv", header, res.rows)
    for row in res.rows:
        print("  ".join(f"{h}={v:.8g}" for h, v in zip(header, row)))
    zmax = cfg.tol("z_max", 5.0)
    summary = {"samples": cfg.samples, "total_mass": dens.total_mass(), "max_z": res.max_z}
    harness.write_manifest(args.out, cfg, "simulate", seed, summary)
    if res.max_z is not None and res.max_z > zmax:
        print(f"cross-check failed: z = {res.max_z:.3g} > {zmax:g}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_exact(cfg, args) -> int:
    rows = harness.run_exact(cfg)
    header = _kcols(cfg.d) + ["re", "im", "quad_err", "points"]
    harness.write_csv(args.out / "exact.csv", header, rows)
    for row in rows:
        print("  ".join(f"{h}={v:.10g}" for h, v in zip(header, row)))
    harness.write_manifest(args.out, cfg, "exact", None, {"t": cfg.t})
    return EXIT_OK


def cmd_diffusion(cfg, args) -> int:
    s = harness.run_diffusion(cfg, workers=args.workers)
    prof = s.profile
    harness.write_csv(args.out / "diffusion.csv", prof.header(), prof.rows())
    summary = {
        "grid": prof.Mp,
        "min_eigenvalue": s.min_eigenvalue,
        "delta_numeric_min": s.delta_numeric_min,
        "delta_bound": s.delta_bound,
        "asymmetry": s.asymmetry,
        "raw_asymmetry": s.raw_asymmetry,
        "form_difference": s.form_difference,
        "continuity_residual": s.continuity_residual,
    }
    for k, v in summary.items():
        print(f"{k:>20} = {v:.10g}")
    harness.write_manifest(args.out, cfg, "diffusion", None, summary)
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    rep = harness.run_verify_scaling(cfg)
    harness.write_csv(args.out / "scaling.csv", harness.ScalingReport.HEADER, rep.table())
    ok = True
    for r in rep.rows:
        print(f"tau={r.tau:<8g} k={r.k.tolist()}  LHS={r.lhs.real:.10f}  RHS={r.rhs.real:.10f}  "
              f"err={r.err:.3e}  remainder={abs(r.remainder):.3e}")
    for k, rate in rep.remainder_rates.items():
        k = np.array(k)
        dec, rok = rep.strictly_decreasing(k), rep.rate_ok(k)
        ok &= dec and rok
        print(f"k={k.tolist()}: errors strictly decreasing: {dec}; remainder rate {rate:.4g} "
              f"vs gap {rep.delta_numeric:.4g}: {'ok' if rok else 'too slow'}")
    rhs_ok = all(e <= cfg.tol("rhs", 1e-8) for e in rep.rhs_check.values())
    ok &= rhs_ok
    summary = {
        "remainder_rates": {str(list(k)): v for k, v in rep.remainder_rates.items()},
        "delta_numeric": rep.delta_numeric,
        "rhs_doubling_error": {str(list(k)): v for k, v in rep.rhs_check.items()},
        "ok": bool(ok),
    }
    harness.write_manifest(args.out, cfg, "verify", None, summary)
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {
    "assumptions": cmd_assumptions,
    "simulate": cmd_simulate,
    "exact": cmd_exact,
    "diffusion": cmd_diffusion,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qdiff", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True,
                    help="JSON config file, or the name of a bundled config (r1, d2n2, ...)")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--cross-check", action="store_true",
                    help="simulate: also evaluate the exact route and report z-scores")
    ap.add_argument("--out", type=Path, default=Path("qdiff_out"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except AssumptionViolation as e:
        print(f"assumption violated: {e}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (NumericalError, ConfigError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
