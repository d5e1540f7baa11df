"""Benchmark harness: run bundled or configured problems, emit CSV + JSON.

``results.csv`` holds one row per outer iteration (or per nullspace method
for the turnback bench); ``summary.json`` carries the final per-level slack
norms, iteration totals, and timings, and round-trips through the config
reader.  Exit codes: 0 converged, 2 iteration cap, 1 error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ocp_spec_from_config, read_config, settings_from_config, write_json
from .problems import (
    default_solo12_spec,
    make_banded_ocp_matrix,
    make_chain_ik,
    make_solo12_ocp,
    make_testfn_hierarchy,
)
from .shlsp import NlSolveResult, RunRecord, SolverSettings, solve_nl_hlsp
from .turnback import lu_nullspace, turnback_nullspace

log = logging.getLogger("nlhlsp")

PROBLEMS = ("testfn", "chain_ik", "solo12", "turnback_bench")

#: per-problem step thresholds from the bundled experiments
DEFAULT_CHI = {"testfn": 1e-5, "chain_ik": 1e-3, "solo12": 0.1}
DEFAULT_EPSILON = {"testfn": 1e-6, "chain_ik": 1e-9, "solo12": 1e-6}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hlsp-bench",
        description="Run a bundled nonlinear hierarchy or a config file and "
        "record per-iteration metrics.",
    )
    p.add_argument("problem", nargs="?", help=f"one of {', '.join(PROBLEMS)}")
    p.add_argument("--problem", dest="problem_flag", help=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON config with problem/settings sections")
    p.add_argument("--hessian", choices=("newton", "bfgs", "gn"), default=None)
    p.add_argument("--chi", type=float, default=None, help="step threshold")
    p.add_argument("--epsilon", type=float, default=None, help="curvature augmentation threshold")
    p.add_argument("--rho0", type=float, default=None, help="initial trust-region radius")
    p.add_argument("--nstra", choices=("on", "off"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--max-outer", type=int, default=None)
    p.add_argument("--nx", type=int, default=12, help="turnback bench: state block size")
    p.add_argument("--nu", type=int, default=3, help="turnback bench: control block size")
    p.add_argument("--T", type=int, default=10, help="turnback bench: horizon")
    p.add_argument("--n-links", type=int, default=6, help="chain_ik link count")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def compare_nullspace_report(a, recycle_seed_stats: bool = True) -> list[dict]:
    """Turnback vs dense-LU nullspace on one matrix, Table-style rows.

    Each row reports nnz and density of Z^T Z, the column update counters,
    and the wall time; the non-recycling turnback variant is included so the
    recycling saving is visible.
    """
    ata = (a.csc.T @ a.csc).tocsc()
    ata_nnz = int(ata.nnz)
    ata_density = ata_nnz / max(1, ata.shape[0] * ata.shape[1])
    rows = []

    def time_method(name, fn):
        t0 = time.perf_counter()
        basis = fn()
        dt = time.perf_counter() - t0
        z = basis.z.csc
        ztz = (z.T @ z).tocsc()
        dim = max(1, ztz.shape[0] * ztz.shape[1])
        stats = basis.stats
        rows.append(
            {
                "method": name,
                "rows": a.rows,
                "cols": a.cols,
                "nnz_ata": ata_nnz,
                "d_ata": round(ata_density, 6),
                "nullity": z.shape[1],
                "nnz_ztz": int(ztz.nnz),
                "d_ztz": round(ztz.nnz / dim, 6),
                "col_add": stats.col_add if stats else 0,
                "col_remove": stats.col_remove if stats else 0,
                "time_s": dt,
                "max_residual": float(np.max(np.abs((a.csc @ z).toarray())))
                if z.shape[1]
                else 0.0,
            }
        )

    time_method("turnback", lambda: turnback_nullspace(a, recycle=True))
    time_method("turnback_norecycle", lambda: turnback_nullspace(a, recycle=False))
    time_method("lu_ns", lambda: lu_nullspace(a))
    return rows


def _write_records_csv(path: Path, records: list[RunRecord], p: int) -> None:
    header = (
        ["k", "hsf_level", "accepted", "converged_level", "h"]
        + [f"f_plus_{j}" for j in range(1, p + 1)]
        + [f"rho_{j}" for j in range(1, p + 1)]
        + ["inner_iterations", "solve_time_s"]
        + [f"nnz_{j}" for j in range(1, p + 1)]
        + ["kkt_residual", "step_norm"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            w.writerow(
                [r.k, r.hsf_level, int(r.accepted), int(r.converged_level), repr(r.h)]
                + [repr(v) for v in r.f_plus]
                + [repr(v) for v in r.rho]
                + [r.inner_iterations, repr(r.solve_time)]
                + [int(v) for v in r.nnz]
                + [repr(r.kkt_residual), repr(r.step_norm)]
            )


def _write_bench_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _solve_summary(result: NlSolveResult, problem: str, settings: SolverSettings) -> dict:
    return {
        "problem": problem,
        "settings": settings.to_dict(),
        "converged": result.converged,
        "status": result.status,
        "levels": len(result.v_star),
        "v_star_norms": [fr.norm() for fr in result.v_star],
        "outer_iterations": result.outer_iterations,
        "inner_iterations": result.inner_iterations,
        "solve_time_s": result.solve_time,
        "x": result.x.tolist(),
    }


def run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = read_config(args.config) if args.config else {}
    problem = args.problem or args.problem_flag or doc.get("problem")
    if problem is None:
        log.error("no problem given: pass a name or --config")
        return 1
    if problem not in PROBLEMS:
        log.error("unknown problem %r (choose from %s)", problem, ", ".join(PROBLEMS))
        return 1

    if problem == "turnback_bench":
        nx = doc.get("nx", args.nx)
        nu = doc.get("nu", args.nu)
        horizon = doc.get("T", args.T)
        a = make_banded_ocp_matrix(nx, nu, horizon, seed=args.seed)
        rows = compare_nullspace_report(a)
        _write_bench_csv(out_dir / "results.csv", rows)
        write_json(
            out_dir / "summary.json",
            {
                "problem": problem,
                "nx": nx,
                "nu": nu,
                "T": horizon,
                "seed": args.seed,
                "rows": rows,
            },
        )
        log.info("turnback bench written to %s", out_dir)
        return 0

    overrides = {
        "chi": args.chi if args.chi is not None else DEFAULT_CHI.get(problem),
        "epsilon": args.epsilon if args.epsilon is not None else DEFAULT_EPSILON.get(problem),
        "rho0": args.rho0,
        "max_outer": args.max_outer,
        "hessian_mode": args.hessian,
        "nstra": {"on": True, "off": False}.get(args.nstra),
    }
    settings = settings_from_config(doc, overrides)

    if problem == "testfn":
        hierarchy = make_testfn_hierarchy()
        x0 = np.full(hierarchy.n, 6.0)
    elif problem == "chain_ik":
        hierarchy = make_chain_ik(doc.get("n_links", args.n_links))
        x0 = np.zeros(hierarchy.n)
    else:  # solo12
        spec = ocp_spec_from_config(doc) or default_solo12_spec()
        hierarchy, x0 = make_solo12_ocp(spec)
    if "x0" in doc:
        x0 = np.asarray(doc["x0"], dtype=float)

    result = solve_nl_hlsp(hierarchy, x0, settings)
    _write_records_csv(out_dir / "results.csv", result.trace, hierarchy.p)
    write_json(out_dir / "summary.json", _solve_summary(result, problem, settings))
    for l, fr in enumerate(result.v_star, start=1):
        log.info("level %d: |v*| = %.6e", l, fr.norm())
    log.info(
        "%s: %s in %d outer / %d inner iterations (%.3f s sub-problem time)",
        problem, result.status, result.outer_iterations,
        result.inner_iterations, result.solve_time,
    )
    return 0 if result.converged else 2


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("HLSP_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except Exception as exc:  # surfaced as exit code 1 with a diagnostic
        log.error("%s", exc)
        if os.environ.get("HLSP_LOG", "").upper() == "DEBUG":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
