"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 non-convergence of the
fixed point, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

SCHEMA = "extremal-domain"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_NONCONV, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(x) -> str:
    """17 significant digits (round-trips every double)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def parse_m_list(text: str) -> List[int]:
    """'8,12,16' or '8..64' (even values in the closed range)."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            a, b = int(a), int(b)
            out.extend(x for x in range(a, b + 1) if x % 2 == 0)
        elif part:
            out.append(int(part))
    if not out:
        raise UsageError(f"empty m list {text!r}")
    return out


# ---------------------------------------------------------------- domain file

def _emit(obj, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_emit(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_emit(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(float(obj)):
            return json.dumps(str(fmt(obj)))
        return fmt(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def domain_to_dict(dom, report=None) -> Dict:
    mt = dom.matching
    model = dom.model
    v = dom.v
    o0, o2 = model.orbits
    d = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "m": mt.m,
        "dimension": 2,
        "lmax": model.lmax,
        "kmax": model.kmax,
        "tau0": mt.tau0,
        "tau2": mt.tau2,
        "zeta": mt.zeta,
        "phi0_prime_p0": mt.phi0_prime_p0,
        "v": {
            "equatorial": {"modes": [int(k) for k in o0.bf_modes], "coeffs": list(v.c0)},
            "polar": {"modes": [int(k) for k in o2.bf_modes], "coeffs": list(v.c2)},
        },
        "f": dom.f,
        "collar_cutoff": "cutoff(0.5, 0, |r - tau| / tau)",
        "boundary_components": mt.m + 2,
    }
    if report is not None:
        d["verification"] = {
            "grad_variation": report.grad_variation,
            "positivity_min": report.positivity_min,
            "pde_residual": report.pde_residual,
            "trace_max": report.trace_max,
            "symmetry_deviation": report.symmetry_deviation,
            "n_components": report.n_components,
            "iterations": report.iterations,
            "final_N": report.final_N,
            "history": list(report.history),
        }
    return d


def write_domain(path: str, dom, report=None) -> None:
    with open(path, "w") as fh:
        fh.write(_emit(domain_to_dict(dom, report)) + "\n")


def read_domain(path: str):
    """Load a domain file; raises UsageError on schema or consistency problems."""
    from .boundary import BoundaryFunction, BoundaryModel
    from .ld2 import matching_for
    from .perturb import DomainSpec

    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read domain file {path}: {exc}")
    if d.get("schema") != SCHEMA or d.get("version") != SCHEMA_VERSION:
        raise UsageError(f"schema mismatch: expected {SCHEMA} v{SCHEMA_VERSION}, "
                         f"got {d.get('schema')} v{d.get('version')}")
    try:
        m = int(d["m"])
        mt = matching_for(m)
        if abs(mt.tau0 - float(d["tau0"])) > 1e-12 * mt.tau0 or \
                abs(mt.tau2 - float(d["tau2"])) > 1e-12 * mt.tau2:
            raise UsageError("stored tau0/tau2 do not match the recomputed matching")
        model = BoundaryModel(mt, int(d["kmax"]), int(d["lmax"]))
        vd = d["v"]
        c0 = np.array(vd["equatorial"]["coeffs"], dtype=float)
        c2 = np.array(vd["polar"]["coeffs"], dtype=float)
        if list(vd["equatorial"]["modes"]) != [int(k) for k in model.orbits[0].bf_modes] or \
                list(vd["polar"]["modes"]) != [int(k) for k in model.orbits[1].bf_modes]:
            raise UsageError("stored modes do not match kmax/lmax")
        if not (np.all(np.isfinite(c0)) and np.all(np.isfinite(c2))):
            raise UsageError("corrupted coefficients (non-finite values)")
        f = float(d["f"])
        v = BoundaryFunction(model, c0, c2)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"corrupted domain file: {exc}")
    return DomainSpec(model, v - f, f)


# ---------------------------------------------------------------- commands

def _write_csv(path: Optional[str], header: Sequence[str], rows: Sequence[Sequence],
               trailer: Sequence[str] = ()) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) if isinstance(x, (float, int, np.floating, np.integer)) else x
                        for x in r])
        for t in trailer:
            fh.write(t + "\n")
    finally:
        if path:
            fh.close()


def cmd_construct(args) -> int:
    from .driver import NonContraction, fixed_point
    from .geom import build_config

    if args.dim != 2:
        raise UsageError("construct supports --dim 2 only (use the dim4 command for S^3)")
    try:
        cfg = build_config(args.m, 2)
    except ValueError as exc:
        raise UsageError(f"configuration: {exc}")
    if args.m < 8:
        raise UsageError("construct needs m >= 8")
    try:
        dom, rep = fixed_point(cfg, args.kmax, args.lmax, args.tol, args.max_iter,
                               samples=args.samples, seed=args.seed)
    except NonContraction as exc:
        print(f"fixed point: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    write_domain(args.out, dom, rep)
    print(rep.summary())
    return EXIT_OK if rep.finite() else EXIT_VERIFY


def cmd_verify(args) -> int:
    from .driver import boundary_points, direct_solve, verify_domain

    dom = read_domain(args.path)
    rep = verify_domain(dom, samples=args.samples, seed=args.seed)
    sol = direct_solve(dom.v)
    th = 2.0 * np.pi * np.arange(args.samples) / args.samples
    rows = []
    cid = 0
    for i, o in enumerate(dom.model.orbits):
        for j in range(len(o.centers)):
            val, grad = sol.eval(boundary_points(dom.v, i, th, j))
            gn = np.linalg.norm(grad, axis=1)
            rows.extend([t, cid, g, x] for t, g, x in zip(th, gn, val))
            cid += 1
    _write_csv(args.out, ["arc_param", "circle_id", "grad_norm", "trace"], rows)
    ok = rep.grad_variation < args.threshold
    print(("PASS " if ok else "FAIL ") + rep.summary() + f" threshold={args.threshold:g}",
          file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(args) -> int:
    from .driver import SWEEP_COLUMNS, sweep

    ms = parse_m_list(args.m)
    rows, slope = sweep(ms, args.kmax, args.lmax, args.tol, args.max_iter, args.samples)
    _write_csv(args.out, SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows],
               [f"# slope_log_vsup_vs_log_tau2,{fmt(slope)}"])
    return EXIT_OK


def cmd_ld(args) -> int:
    from .ld2 import matching_for

    rows = []
    for m in parse_m_list(args.m):
        try:
            mt = matching_for(m)
            rows.append([m, mt.tau0, mt.tau2, mt.r, mt.zeta, mt.phi0_prime_p0, ""])
        except (ValueError, RuntimeError) as exc:
            rows.append([m] + [float("nan")] * 5 + [str(exc)])
    _write_csv(args.out, ["m", "tau0", "tau2", "r", "zeta", "phi0p", "error"], rows)
    return EXIT_OK


def cmd_dim4(args) -> int:
    from .dim4 import shoot_F, tau4

    F = shoot_F().F
    rows = []
    for m in parse_m_list(args.m):
        try:
            tau, php = tau4(m, F)
            rows.append([m, F, tau, php, tau * m * m / (np.pi * F), ""])
        except ValueError as exc:
            rows.append([m, F] + [float("nan")] * 3 + [str(exc)])
    _write_csv(args.out, ["m", "F", "tau", "phi3p", "tau_m2_over_piF", "error"], rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="extremal-domains", formatter_class=fmt_cls,
                description="Construct and verify perforated spheres whose first Dirichlet "
                            "eigenfunction has constant boundary gradient.")
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("construct", formatter_class=fmt_cls,
                       help="run the fixed point and write a domain file")
    c.add_argument("--m", type=int, required=True, help="even number of equatorial holes (>= 8)")
    c.add_argument("--dim", type=int, default=2, help="sphere dimension (only 2 is constructed)")
    c.add_argument("--lmax", type=int, default=None,
                   help="collar/multipole mode order (default max(16, 2 kmax))")
    c.add_argument("--kmax", type=int, default=8, help="boundary modes on the equatorial circles")
    c.add_argument("--tol", type=float, default=1e-6, help="stop when |N| < tol tau2^(5/2)")
    c.add_argument("--max-iter", type=int, default=40, help="maximum fixed-point iterations")
    c.add_argument("--samples", type=int, default=256, help="boundary samples per circle")
    c.add_argument("--seed", type=int, default=0, help="seed for verification sampling")
    c.add_argument("--out", required=True, help="output domain file (JSON)")
    c.set_defaults(func=cmd_construct)

    v = sub.add_parser("verify", formatter_class=fmt_cls,
                       help="recompute a stored domain; CSV columns "
                            "arc_param,circle_id,grad_norm,trace")
    v.add_argument("path", help="domain file written by construct")
    v.add_argument("--threshold", type=float, default=1e-3,
                   help="pass if gradient variation max/min - 1 is below this")
    v.add_argument("--samples", type=int, default=256, help="boundary samples per circle")
    v.add_argument("--seed", type=int, default=0, help="seed for verification sampling")
    v.add_argument("--out", default=None, help="CSV output path (default stdout)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", formatter_class=fmt_cls,
                       help="construct for several m; CSV columns "
                            "m,tau0,tau2,zeta,v_sup,grad_variation,iterations,wall_time,error "
                            "and a trailing '# slope' row")
    s.add_argument("--m", default="8,12,16,20", help="comma list or a..b range of even m")
    s.add_argument("--kmax", type=int, default=8, help="boundary modes on the equatorial circles")
    s.add_argument("--lmax", type=int, default=None, help="collar/multipole mode order")
    s.add_argument("--tol", type=float, default=1e-6, help="fixed-point tolerance")
    s.add_argument("--max-iter", type=int, default=40, help="maximum fixed-point iterations")
    s.add_argument("--samples", type=int, default=256, help="boundary samples per circle")
    s.add_argument("--seed", type=int, default=0, help="seed for verification sampling")
    s.add_argument("--out", default=None, help="CSV output path (default stdout)")
    s.set_defaults(func=cmd_sweep)

    ld = sub.add_parser("ld", formatter_class=fmt_cls,
                        help="matching data table; CSV columns m,tau0,tau2,r,zeta,phi0p,error")
    ld.add_argument("--m", default="8..64", help="comma list or a..b range of even m")
    ld.add_argument("--out", default=None, help="CSV output path (default stdout)")
    ld.set_defaults(func=cmd_ld)

    d4 = sub.add_parser("dim4", formatter_class=fmt_cls,
                        help="S^3 lattice data; CSV columns m,F,tau,phi3p,tau_m2_over_piF,error")
    d4.add_argument("--m", default="8..32", help="comma list or a..b range of even m")
    d4.add_argument("--out", default=None, help="CSV output path (default stdout)")
    d4.set_defaults(func=cmd_dim4)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
