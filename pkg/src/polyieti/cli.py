"""Batch front end: domain generation, solves, convergence and rank studies.

Every command reads an optional JSON config (flags override file fields),
validates the discretization parameters before doing any work, and writes
deterministic artifacts: JSON for solutions and diagnostics, CSV for tabular
reports, so identical configurations produce bitwise-identical files.

Exit codes: 0 success; 1 numerical failure (the message names the pipeline
stage); 2 configuration or input error.  POLYIETI_BACKEND / POLYIETI_THREADS
select the assembly kernel backend and its thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ieti, verify
from .domains import (
    BUILTIN_DOMAINS,
    MultiPatchDomain,
    builtin_domain,
    load_domain,
    save_domain,
)
from .errors import ConfigError, InputError, PolyIetiError
from .manufactured import SOLUTIONS
from .splines import make_tensor_space

log = logging.getLogger("polyieti")

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2


@dataclass
class RunConfig:
    """One solve/study configuration; JSON file fields mirror these names."""

    domain: str = "corner3L"      # built-in name or path to a domain file
    m: int = 2                    # operator order: (-Lap)^m
    s: int = 1                    # coupling smoothness across patches
    p: int = 3                    # spline degree
    r: int = 1                    # spline regularity inside patches
    k: int = 1                    # interior knots per direction (single solve)
    levels: int = 3               # refinement levels (convergence study)
    h0: float = 0.5               # coarsest mesh size (convergence study)
    solution: str = "trig"        # manufactured solution name
    tol: float = 1e-10            # dual CG relative tolerance
    max_iter: int | None = None   # dual CG iteration cap (None: 10x rows)
    out: str = "."                # output directory


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults <- JSON file <- command-line overrides, in that order."""
    values: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(
                f"{path}: unknown config keys {unknown}; known: {sorted(known)}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    if cfg.solution not in SOLUTIONS:
        raise ConfigError(
            f"unknown manufactured solution {cfg.solution!r}; "
            f"choose from {sorted(SOLUTIONS)}")
    return cfg


def resolve_domain(cfg: RunConfig) -> MultiPatchDomain:
    """Built-in name (gluing built to order cfg.s) or a saved domain file."""
    if cfg.domain in BUILTIN_DOMAINS:
        return builtin_domain(cfg.domain, cfg.s)
    dom = load_domain(cfg.domain)
    if dom.s < cfg.s:
        raise ConfigError(
            f"domain file {cfg.domain} carries gluing data up to order "
            f"{dom.s}, run needs s = {cfg.s}")
    return dom


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(_jsonable(doc), f, indent=1, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# --- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.name not in BUILTIN_DOMAINS:
        raise ConfigError(
            f"unknown built-in domain {args.name!r}; choose from {BUILTIN_DOMAINS}")
    dom = builtin_domain(args.name, args.smoothness)
    save_domain(dom, args.path)
    check = load_domain(args.path)
    if check.n_patches != dom.n_patches or len(check.inner_edges) != len(dom.inner_edges):
        raise ConfigError(f"{args.path}: written domain failed to round-trip")
    log.info("wrote %s: %d patches, %d inner edges", args.path,
             dom.n_patches, len(dom.inner_edges))
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    ieti.validate_parameters(cfg.m, cfg.s, cfg.p, cfg.r, cfg.k)
    dom = resolve_domain(cfg)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)

    sol = ieti.solve(dom, m=cfg.m, s=cfg.s, p=cfg.p, r=cfg.r, k=cfg.k,
                     solution=cfg.solution, tol=cfg.tol, max_iter=cfg.max_iter)
    space = make_tensor_space(cfg.p, cfg.r, cfg.k)
    err = verify.seminorm_error(dom, space, sol.coefficients,
                                SOLUTIONS[cfg.solution], cfg.m)
    smooth = verify.smoothness_probe(dom, space, sol.coefficients, cfg.s)

    _write_json(outdir / "solution.json", {
        "config": asdict(cfg),
        "n": int(space.U.n),
        "coefficients": sol.coefficients,
        "boundary_values": sol.u_b,
        "multipliers": {
            "edge": sol.lam_gamma,
            "vertex": sol.lam_xi,
            "boundary": sol.lam_b,
        },
    })
    _write_json(outdir / "diagnostics.json", {
        "config": asdict(cfg),
        "seminorm_error": err,
        "smoothness": {
            "max_edge_jump": smooth.max_edge_jump,
            "max_vertex_jump": smooth.max_vertex_jump,
            "max_value": smooth.max_value,
        },
        **sol.diagnostics,
    })
    log.info("solve done: seminorm error %.3e, cg %d iterations",
             err, sol.diagnostics["cg_iterations"])
    return EXIT_OK


def cmd_convergence(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    k0 = max(round(1.0 / cfg.h0) - 1, 0)
    ieti.validate_parameters(cfg.m, cfg.s, cfg.p, cfg.r, k0)
    dom = resolve_domain(cfg)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)

    rep = verify.convergence_study(
        dom, m=cfg.m, s=cfg.s, p=cfg.p, r=cfg.r, levels=cfg.levels,
        h0=cfg.h0, solution=cfg.solution, tol=cfg.tol, max_iter=cfg.max_iter)

    rows = []
    for j in range(len(rep.h)):
        order = repr(float(rep.orders[j - 1])) if j > 0 else ""
        rows.append([j, repr(float(rep.h[j])), int(rep.dof[j]),
                     repr(float(rep.error[j])), order])
    _write_csv(outdir / "convergence.csv",
               ["level", "h", "dof", "error", "observed_order"], rows)
    _write_csv(outdir / "plot_data.csv", ["log10_h", "log10_error"],
               [[repr(float(np.log10(rep.h[j]))),
                 repr(float(np.log10(rep.error[j])))]
                for j in range(len(rep.h))])
    log.info("convergence study done: errors %s", list(rep.error))
    return EXIT_OK


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    if not text.strip():
        return []
    pairs = []
    for item in text.split(","):
        try:
            a, b = item.split(":")
            pairs.append((int(a), int(b)))
        except ValueError as exc:
            raise ConfigError(
                f"bad (p:r) pair {item!r}; expected like 3:1") from exc
    return pairs


def cmd_rank_study(args) -> int:
    pairs = _parse_pairs(args.pairs)
    try:
        k_values = tuple(int(v) for v in args.k_values.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad k values {args.k_values!r}") from exc
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    records = verify.rank_deficiency_study(
        args.m, pairs, k_values=k_values, n_random=args.random)
    _write_csv(outdir / "rank_study.csv",
               ["m", "p", "r", "k", "patch", "deficiency", "bound"],
               [[rec["m"], rec["p"], rec["r"], rec["k"], rec["patch"],
                 rec["deficiency"], rec["bound"]] for rec in records])
    log.info("rank study done: %d records", len(records))
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def _overrides(args) -> dict:
    keys = ("domain", "m", "s", "p", "r", "k", "levels", "h0", "solution",
            "tol", "max_iter", "out")
    return {key: getattr(args, key, None) for key in keys}


def _add_common(sub: argparse.ArgumentParser, with_mesh: bool) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--domain", help="built-in domain name or domain file path")
    sub.add_argument("--m", type=int, help="operator order")
    sub.add_argument("--s", type=int, help="coupling smoothness")
    sub.add_argument("--p", type=int, help="spline degree")
    sub.add_argument("--r", type=int, help="spline regularity")
    if with_mesh:
        sub.add_argument("--k", type=int, help="interior knots per direction")
    else:
        sub.add_argument("--levels", type=int, help="refinement levels")
        sub.add_argument("--h0", type=float, help="coarsest mesh size (1/cells)")
    sub.add_argument("--solution", help="manufactured solution name")
    sub.add_argument("--tol", type=float, help="dual CG relative tolerance")
    sub.add_argument("--max-iter", dest="max_iter", type=int,
                     help="dual CG iteration cap")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyieti",
        description="Polyharmonic multi-patch spline solver front end.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="write a built-in domain file")
    gen.add_argument("name", help=f"one of {', '.join(BUILTIN_DOMAINS)}")
    gen.add_argument("path", help="output domain file")
    gen.add_argument("--smoothness", type=int, default=2,
                     help="gluing-data order stored in the file (default 2)")
    gen.set_defaults(func=cmd_generate)

    slv = commands.add_parser("solve", help="single solve, JSON outputs")
    _add_common(slv, with_mesh=True)
    slv.set_defaults(func=cmd_solve)

    cnv = commands.add_parser("convergence",
                              help="refinement study, CSV outputs")
    _add_common(cnv, with_mesh=False)
    cnv.set_defaults(func=cmd_convergence)

    rnk = commands.add_parser("rank-study",
                              help="patch stiffness kernel dimensions, CSV")
    rnk.add_argument("--m", type=int, required=True, help="operator order")
    rnk.add_argument("--pairs", default="",
                     help="comma list of degree:regularity, e.g. 2:1,3:1")
    rnk.add_argument("--k-values", dest="k_values", default="0,1",
                     help="comma list of interior knot counts")
    rnk.add_argument("--random", type=int, default=5,
                     help="number of seeded random bilinear patches")
    rnk.add_argument("--out", default=".", help="output directory")
    rnk.set_defaults(func=cmd_rank_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"polyieti: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PolyIetiError as exc:
        print(f"polyieti: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"polyieti: io failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
