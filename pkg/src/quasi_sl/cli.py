"""``quasi-sl`` command line front end.

Exit status: 0 on success, 2 for invalid input (configuration, flags), 3 for
numerical failures (propagation, winding, near-eigenvalue solves).
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys

import numpy as np

from .analysis import completeness_suite, dissipativity_suite, green_identity_suite
from .coeffexpr import parse_expr
from .config import Config, ConfigError, load_config
from .errors import ExprError, QuasiSLError, SpecError
from .spectral import apply_resolvent, find_eigenvalues, green_kernel, hs_norm
from .triplet import traces

log = logging.getLogger("quasi_sl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUITES = ("green_identity", "dissipativity", "completeness")
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(SpecError):
    pass


def fmt(x: float) -> str:
    """17 significant digits: round-trips any double."""
    return format(float(x), ".17g")


def write_csv(stream, header, rows):
    stream.write(",".join(header) + "\n")
    for row in rows:
        stream.write(",".join(fmt(v) for v in row) + "\n")


def parse_complex(text: str) -> complex:
    """``"2"``, ``"1+2j"``, ``"16*i"`` or any constant expression in ``i``."""
    try:
        return complex(text.replace(" ", ""))
    except ValueError:
        pass
    try:
        expr = parse_expr(text, allow_complex=True)
    except ExprError as exc:
        raise UsageError(f"cannot read complex number {text!r}: {exc}") from exc
    if expr.depends_on_t:
        raise UsageError(f"{text!r} must not depend on t")
    return complex(expr(0.0))


def _sample_function(y, problem, n):
    rows = []
    for k in range(problem.m):
        lo, hi = problem.bounds(k)
        t = np.linspace(lo, hi, n)
        v = y.v(k, t)
        for ti, (a, b) in zip(t, v):
            rows.append((ti, a.real, a.imag, b.real, b.imag))
    return rows


FUNCTION_HEADER = ("t", "re_y", "im_y", "re_D1y", "im_D1y")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Outputs:
    """CSV body goes to ``--out`` (or stdout); a JSON summary goes next to it
    as ``<out>.json`` (or to stderr when writing CSV to stdout)."""

    def __init__(self, out):
        self.out = out

    def csv(self, header, rows):
        buf = io.StringIO()
        write_csv(buf, header, rows)
        self._write(self.out, buf.getvalue(), sys.stdout)

    def json(self, obj, primary: bool = False):
        text = _dump_json(obj)
        if primary:
            self._write(self.out, text, sys.stdout)
        elif self.out:
            self._write(self.out + ".json", text, None)
        else:
            sys.stderr.write(text)

    @staticmethod
    def _write(path, text, fallback):
        if path:
            with open(path, "w", newline="\n") as fh:
                fh.write(text)
        else:
            fallback.write(text)


def _need_region(cfg: Config):
    if cfg.region is None:
        raise UsageError("this command needs a 'search' section in the configuration")
    return cfg.region


def _eigs(cfg: Config, args, root_functions=False):
    return find_eigenvalues(cfg.problem, cfg.boundary, None, _need_region(cfg), cfg.max_count,
                            rtol=cfg.rtol, atol=cfg.atol, threads=args.threads,
                            root_functions=root_functions)


def cmd_classify(cfg: Config, args, out: Outputs):
    out.json(cfg.boundary.report(), primary=True)


def cmd_eigs(cfg: Config, args, out: Outputs):
    ev = _eigs(cfg, args)
    out.csv(("re_lambda", "im_lambda", "alg_mult", "geo_mult", "residual"),
            [(e.lam.real, e.lam.imag, e.alg_mult, e.geo_mult, e.residual) for e in ev])
    log.info("region winding %d over %d leaf boxes, %d determinant evaluations",
             ev.winding, len(ev.boxes), ev.evaluations)


def cmd_eigfun(cfg: Config, args, out: Outputs):
    ev = _eigs(cfg, args, root_functions=True)
    if not 0 <= args.index < len(ev):
        raise UsageError(f"--index {args.index} out of range: {len(ev)} eigenvalue(s) found")
    e = ev[args.index]
    out.csv(FUNCTION_HEADER, _sample_function(e.eigenfunction, cfg.problem, args.samples))
    log.info("eigenvalue %r", e.lam)


def cmd_green(cfg: Config, args, out: Outputs):
    lam = parse_complex(args.lam)
    kern = green_kernel(cfg.problem, cfg.boundary, None, lam, args.grid, rtol=cfg.rtol, atol=cfg.atol)
    fine = green_kernel(cfg.problem, cfg.boundary, None, lam, 2 * args.grid, rtol=cfg.rtol, atol=cfg.atol)
    hs, hs_fine = hs_norm(kern), hs_norm(fine)
    t, s = np.meshgrid(kern.nodes, kern.nodes, indexing="ij")
    G = kern.values
    out.csv(("t", "s", "re_G", "im_G"),
            zip(t.ravel(), s.ravel(), G.real.ravel(), G.imag.ravel()))
    out.json({"lambda": [lam.real, lam.imag], "grid": args.grid, "hs_norm": hs,
              "hs_norm_refined": hs_fine, "grid_refinement_delta": abs(hs_fine - hs)})


def cmd_resolve(cfg: Config, args, out: Outputs):
    lam = parse_complex(args.lam)
    try:
        h = parse_expr(args.h, allow_complex=True)
    except ExprError as exc:
        raise UsageError(f"--h: {exc}") from exc
    y = apply_resolvent(cfg.problem, cfg.boundary, None, lam, h, rtol=cfg.rtol, atol=cfg.atol)
    bres = float(np.linalg.norm(cfg.boundary.residual(traces(y))))
    out.csv(FUNCTION_HEADER, _sample_function(y, cfg.problem, args.samples))
    out.json({"lambda": [lam.real, lam.imag], "residual": y.residual_lmax(),
              "ode_residual": y.ode_residual(), "boundary_residual": bres,
              "condition": y.condition})


def cmd_verify(cfg: Config, args, out: Outputs):
    wanted = [s.strip() for s in args.suites.split(",") if s.strip()]
    bad = [s for s in wanted if s not in SUITES]
    if bad:
        raise UsageError(f"unknown suite(s) {bad}; choose from {list(SUITES)}")
    results = {}
    rng = np.random.default_rng(args.seed)
    seeds = {name: int(rng.integers(2 ** 31)) for name in SUITES}
    if "green_identity" in wanted:
        rep = green_identity_suite(cfg.problem, args.samples, seed=seeds["green_identity"],
                                   rtol=cfg.rtol, atol=cfg.atol)
        results["green_identity"] = rep.to_dict()
    if "dissipativity" in wanted:
        rep = dissipativity_suite(cfg.problem, cfg.boundary, None, args.samples,
                                  seed=seeds["dissipativity"], rtol=cfg.rtol, atol=cfg.atol)
        d = rep.to_dict()
        d["contraction"] = cfg.boundary.is_contraction
        results["dissipativity"] = d
    if "completeness" in wanted:
        reps = completeness_suite(cfg.problem, cfg.boundary, None, _need_region(cfg),
                                  rtol=cfg.rtol, atol=cfg.atol, threads=args.threads)
        results["completeness"] = {
            "passed": all(r.monotone for r in reps),
            "criterion": "residual non-increasing in N",
            "reports": [r.to_dict() for r in reps],
        }
    out.json({"passed": all(r["passed"] for r in results.values()), "seed": args.seed,
              "suites": results}, primary=True)


COMMANDS = {"classify": cmd_classify, "eigs": cmd_eigs, "eigfun": cmd_eigfun,
            "green": cmd_green, "resolve": cmd_resolve, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized suites")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (default: machine parallelism)")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--tol-rel", type=float, help="relative integration tolerance")
    common.add_argument("--tol-abs", type=float, help="absolute integration tolerance")

    parser = argparse.ArgumentParser(prog="quasi-sl", description=(
        "Spectra, resolvents and completeness diagnostics for multi-interval "
        "Sturm-Liouville operators with distributional coefficients."))
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("classify", parents=[common], help="classify the boundary matrix K")
    sub.add_parser("eigs", parents=[common], help="eigenvalues in the search region (CSV)")
    p = sub.add_parser("eigfun", parents=[common], help="sampled eigenfunction (CSV)")
    p.add_argument("--index", type=int, default=0, help="0-based index into the sorted eigenvalues")
    p.add_argument("--samples", type=int, default=201, help="samples per interval")
    p = sub.add_parser("green", parents=[common], help="Green kernel (CSV) and HS norm (JSON)")
    p.add_argument("--lambda", dest="lam", default="0", help="spectral parameter, e.g. 0, 1+2j, 16*i")
    p.add_argument("--grid", type=int, default=64, help="Gauss nodes per panel")
    p = sub.add_parser("resolve", parents=[common], help="solve l[y] = lambda y + h (CSV + JSON)")
    p.add_argument("--lambda", dest="lam", default="0", help="spectral parameter")
    p.add_argument("--h", required=True, help="forcing expression in t")
    p.add_argument("--samples", type=int, default=201, help="samples per interval")
    p = sub.add_parser("verify", parents=[common], help="run verification suites (JSON)")
    p.add_argument("--suites", default=",".join(SUITES), help="comma-separated subset of " + ",".join(SUITES))
    p.add_argument("--samples", type=int, default=20, help="random samples per suite")
    return parser


def _configure_logging():
    level = _LEVELS.get(os.environ.get("QUASI_SL_LOG", "warn").strip().lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("quasi_sl").setLevel(level)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config).with_tolerances(args.tol_rel, args.tol_abs)
        if (args.tol_rel is not None and args.tol_rel <= 0) or (args.tol_abs is not None and args.tol_abs <= 0):
            raise UsageError("tolerances must be positive")
        if getattr(args, "grid", 2) < 2 or getattr(args, "samples", 2) < 2:
            raise UsageError("--grid and --samples must be at least 2")
        COMMANDS[args.command](cfg, args, Outputs(args.out))
    except (ConfigError, UsageError, SpecError, ExprError) as exc:
        sys.stderr.write(f"quasi-sl: error: {exc}\n")
        return EXIT_CONFIG
    except QuasiSLError as exc:
        sys.stderr.write(f"quasi-sl: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"quasi-sl: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
