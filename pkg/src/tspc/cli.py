"""Command-line front end (``tspc``).

Exit codes: 0 success, 1 solver failure, 2 usage error, 3 missing data.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import debris as deb
from . import static_tsp as st
from .engine import EvaluationError
from .optimizer import OptimizerConfig, OptimizerError
from .orbital import EphemerisError, compare_secular_rk4, convert_gtoc9_table
from .report import REPORT_SCHEMA, ReportError, RunReport, read_report, write_report, write_trace_csv

EXIT_OK, EXIT_SOLVER, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("tspc")


class UsageError(Exception):
    pass


def _mode(value: str) -> str:
    return value.replace("-", "_")


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def _emit(report: RunReport, args) -> None:
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")


def _finish_trace(trace, args) -> str | None:
    if args.trace:
        write_trace_csv(trace, args.trace)
        return str(args.trace)
    return None


# --------------------------------------------------------------------------
# solve-static


def cmd_solve_static(args) -> int:
    points = st.load_points(args.points) if args.points else st.BENCHMARK
    if args.oracle:
        t0 = time.perf_counter()
        tour = st.held_karp_optimal(points, args.depot)
        print(f"Held-Karp optimum {tour.length:.10f}")
        print("route " + " ".join(map(str, tour.order)))
        if args.out:
            legs = [{"origin": a, "target": b, "cost": points.distance(a, b), "tof": None}
                    for a, b in zip(tour.order, tour.order[1:])]
            report = RunReport(
                problem={"kind": "static", "solver": "held-karp", "n_points": len(points.ids)},
                config={"depot": args.depot}, route=list(tour.order), legs=legs,
                total_cost=tour.length, penalties=[], status="optimal", seed=args.seed,
                wall_time=None if args.deterministic else time.perf_counter() - t0,
            )
            _emit(report, args)
        return EXIT_OK

    if args.init == "solution-a" and args.points:
        raise UsageError("--init solution-a only applies to the built-in benchmark")
    opt = st.static_optimizer_config(max_iterations=args.max_iter)
    t0 = time.perf_counter()
    result = st.solve_static(_mode(args.mode), args.init, args.restarts, args.seed, points, args.depot, opt, args.jobs)
    wall = time.perf_counter() - t0
    ev = result.evaluation
    legs = [{"origin": a, "target": b, "cost": points.distance(a, b), "tof": None}
            for a, b in zip(result.route, result.route[1:])]
    report = RunReport(
        problem={"kind": "static", "n_points": len(points.ids), "depot": args.depot,
                 "points": str(args.points) if args.points else "benchmark"},
        config={"mode": _mode(args.mode), "init": args.init, "restarts": args.restarts,
                "max_iterations": args.max_iter, "jobs": args.jobs},
        route=list(result.route), legs=legs, total_cost=ev.total_cost,
        penalties=[float(p) for p in ev.penalties], status=result.trace.status, seed=args.seed,
        objective=ev.objective, iterations=result.trace.iterations,
        trace_csv=_finish_trace(result.trace, args),
        wall_time=None if args.deterministic else wall,
        extra={"restart_costs": [r.objective for r in result.runs.runs]},
    )
    print(f"route {' '.join(map(str, result.route))}")
    print(f"cost {ev.total_cost:.6f}  objective {ev.objective:.6f}  status {result.trace.status}")
    _emit(report, args)
    return EXIT_OK


# --------------------------------------------------------------------------
# solve-debris


def _load_catalog(args) -> deb.DebrisCatalog:
    if getattr(args, "synthetic", False):
        return deb.load_synthetic_catalog()
    return deb.DebrisCatalog.from_file(deb.locate_catalog(args.ephemeris))


def _read_route(path: str) -> list[int]:
    data = json.loads(Path(path).read_text())
    route = data.get("route") if isinstance(data, dict) else data
    if not isinstance(route, list) or not all(isinstance(k, int) for k in route):
        raise UsageError(f"{path}: expected a JSON id list or an object with a 'route' list")
    return route


def cmd_solve_debris(args) -> int:
    catalog = _load_catalog(args)
    config = deb.load_mission_config(args.config) if args.config else deb.MissionConfig()
    if args.synthetic and config.start_debris not in catalog:
        raise UsageError(f"start debris {config.start_debris} is not in the synthetic fixture")
    run_step_one = args.refine is None
    run_step_two = args.refine is not None or args.fixed_tof is None
    fixed_tof = args.fixed_tof if args.fixed_tof is not None else (config.fixed_tof or 20.0)
    t0 = time.perf_counter()
    extra: dict = {}
    trace = None
    penalties: list[float] = []
    objective = None
    status = "refined"

    if run_step_one:
        opt = OptimizerConfig(max_iterations=args.max_iter, restarts=args.restarts)
        first = deb.solve_fixed_tof(catalog, config, opt, seed=args.seed, fixed_tof=fixed_tof,
                                    spread=args.spread, jobs=args.jobs)
        route = first.route
        trace = first.trace
        penalties = [float(p) for p in first.evaluation.penalties]
        objective = first.evaluation.objective
        status = first.trace.status
        tofs = [fixed_tof] * (len(route) - 1)
        dvs = deb.route_costs(route, tofs, catalog, config)
        extra["fixed_tof_total_dv"] = float(dvs.sum() * 1000.0)
        print(f"step one ({len(route) - 1} transfers, ToF {fixed_tof} d): route {' '.join(map(str, route))}")
        print(f"  total dv {dvs.sum() * 1000.0:.1f} m/s, max penalty {first.evaluation.max_penalty:.4f}")
    else:
        route = _read_route(args.refine)

    if run_step_two:
        refine_opt = OptimizerConfig(max_iterations=args.max_iter, objective_tolerance=1e-12)
        start_tofs = tofs if run_step_one else None
        refined = deb.refine_tof(route, catalog, config, refine_opt, initial_tofs=start_tofs)
        tofs = refined.tofs.tolist()
        dvs = refined.dvs
        extra["refine_status"] = refined.trace.status
        if trace is None:
            trace = refined.trace
            status = refined.trace.status
        print(f"step two: total dv {refined.total_dv * 1000.0:.1f} m/s "
              f"(from {refined.initial_total_dv * 1000.0:.1f} m/s)")

    wall = time.perf_counter() - t0
    legs = [{"origin": int(a), "target": int(b), "cost": float(dv * 1000.0), "tof": float(t)}
            for a, b, dv, t in zip(route, route[1:], dvs, tofs)]
    for leg in legs:
        print(f"  {leg['origin']:>4} -> {leg['target']:<4} ToF {leg['tof']:7.3f} d  dv {leg['cost']:8.1f} m/s")
    report = RunReport(
        problem={"kind": "debris", "catalog": "synthetic" if args.synthetic else str(deb.locate_catalog(args.ephemeris)),
                 "n_debris": len(catalog)},
        config={**config.as_dict(), "fixed_tof_days": fixed_tof, "restarts": args.restarts,
                "max_iterations": args.max_iter, "spread": args.spread,
                "steps": [s for s, on in (("fixed_tof", run_step_one), ("refine", run_step_two)) if on]},
        route=[int(k) for k in route], legs=legs, total_cost=float(sum(leg["cost"] for leg in legs)),
        cost_unit="m/s", penalties=penalties, status=status, seed=args.seed, objective=objective,
        iterations=trace.iterations if trace is not None else None,
        trace_csv=_finish_trace(trace, args) if trace is not None else None,
        wall_time=None if args.deterministic else wall, extra=extra,
    )
    _emit(report, args)
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect / schema-check


def cmd_inspect(args) -> int:
    if args.what == "convert":
        if not args.source or not args.ephemeris:
            raise UsageError("inspect convert needs --source and --ephemeris")
        n = convert_gtoc9_table(args.source, args.ephemeris)
        print(f"{n} debris written to {args.ephemeris}")
        return EXIT_OK
    catalog = _load_catalog(args)
    if args.what == "stats":
        stats = deb.catalog_statistics(catalog)
        units = {"a": "km", "e": "", "i": "deg", "raan": "deg"}
        print(f"{'':6}{'unit':>6}{'mean':>14}{'std':>14}{'max':>14}{'min':>14}")
        for name, row in stats.items():
            print(f"{name:6}{units[name]:>6}" + "".join(f"{row[k]:>14.6g}" for k in ("mean", "std", "max", "min")))
        return EXIT_OK
    if args.id is None:
        raise UsageError("inspect propagate needs --id")
    if args.id not in catalog:
        raise UsageError(f"debris {args.id} not in catalog")
    secular, integrated = compare_secular_rk4(catalog[args.id], args.days, args.step)
    print(f"debris {args.id}, {args.days} days")
    print(f"  secular node drift {math.degrees(secular):+.6f} deg")
    print(f"  RK4 node drift     {math.degrees(integrated):+.6f} deg")
    print(f"  difference         {math.degrees(secular - integrated):+.6f} deg")
    return EXIT_OK


def cmd_schema_check(args) -> int:
    if args.print_schema:
        print(json.dumps(REPORT_SCHEMA, indent=2))
        return EXIT_OK
    if not args.report:
        raise UsageError("schema-check needs a report path or --print-schema")
    for path in args.report:
        read_report(path)
        print(f"{path}: valid")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tspc", description="Continuous Bayesian relaxation of sequencing problems.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--restarts", type=_positive_int, default=1)
        p.add_argument("--jobs", type=_positive_int, default=1)
        p.add_argument("--max-iter", type=_positive_int, default=300)
        p.add_argument("--out", help="write the JSON report here")
        p.add_argument("--trace", help="write the convergence CSV here")
        p.add_argument("--deterministic", action="store_true", help="omit wall-clock time from the report")

    p = sub.add_parser("solve-static", help="solve the planar benchmark")
    p.add_argument("--mode", choices=["map", "chi-square"], default="map")
    p.add_argument("--init", choices=["solution-a", "uniform"], default="solution-a")
    p.add_argument("--points", help="id,x,y CSV instead of the built-in 14 points")
    p.add_argument("--depot", type=int, default=st.DEPOT)
    p.add_argument("--oracle", action="store_true", help="print the Held-Karp optimum instead")
    common(p)
    p.set_defaults(func=cmd_solve_static)

    p = sub.add_parser("solve-debris", help="debris rendezvous sequence")
    p.add_argument("--ephemeris", help=f"catalog CSV (default ${deb.DATA_ENV}/{deb.CATALOG_FILENAME})")
    p.add_argument("--synthetic", action="store_true", help="use the bundled 20-debris fixture")
    p.add_argument("--config", help="key-value mission file")
    p.add_argument("--fixed-tof", type=float, help="run only the fixed-ToF route search with this ToF (days)")
    p.add_argument("--refine", help="run only ToF refinement on the route in this JSON file")
    p.add_argument("--spread", type=float, default=0.0, help="jitter of restart offsets, fraction of their range")
    common(p)
    p.set_defaults(func=cmd_solve_debris)

    p = sub.add_parser("inspect", help="catalog statistics, propagation check, table conversion")
    p.add_argument("what", choices=["stats", "propagate", "convert"])
    p.add_argument("--ephemeris")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--source", help="raw GTOC-9 table for convert")
    p.add_argument("--id", type=int)
    p.add_argument("--days", type=float, default=10.0)
    p.add_argument("--step", type=float, default=10.0, help="RK4 step in seconds")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("schema-check", help="validate report files against the schema")
    p.add_argument("report", nargs="*")
    p.add_argument("--print-schema", action="store_true")
    p.set_defaults(func=cmd_schema_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tspc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except deb.CatalogNotFoundError as exc:
        print(f"tspc: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, EphemerisError) as exc:
        print(f"tspc: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReportError as exc:
        print(f"tspc: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OptimizerError, EvaluationError, KeyError, ValueError) as exc:
        print(f"tspc: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
