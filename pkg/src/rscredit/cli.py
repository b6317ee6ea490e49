"""Command line interface: ``rscredit <subcommand> ...``.

Every subcommand prints a JSON summary on stdout and exits 0; failures exit
nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import approximation, io
from .dpe_solver import TimeGrid, dpe_residual, solve_finite, value_function
from .model import bitstring, parse_bitstring, validate_model


def _ints(text: str) -> list:
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


def _parse_init(text: str) -> dict:
    init = {"t": 0.0, "i": 1, "z": None, "x": 1.0}
    for item in text.split(","):
        if "=" not in item:
            raise ValueError(f"--init entries must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in init:
            raise ValueError(f"unknown --init key {k!r} (expected t, i, z, x)")
        init[k] = v.strip() if k == "z" else (int(v) if k == "i" else float(v))
    return init


def _emit(obj) -> None:
    print(json.dumps(io._jsonable(obj), indent=2))


def _grid(args, cfg, spec) -> TimeGrid:
    return TimeGrid(spec.T, args.M if getattr(args, "M", None) else cfg.M)


def cmd_validate(args) -> int:
    cfg, spec = io.load_config(args.config, validate=False)
    report = validate_model(spec, row_tol=cfg.row_sum_tol, pd_floor=cfg.pd_floor)
    out = report.as_dict()
    if report.ok:
        _emit(out)
        return 0
    print(json.dumps({"error": "ValidationError", **out}), file=sys.stderr)
    return 1


def cmd_solve(args) -> int:
    cfg, spec = io.load_config(args.config)
    grid = _grid(args, cfg, spec)
    t0 = time.perf_counter()
    sol = solve_finite(spec.finite_model(), grid, cfg.foc_tol)
    wall = time.perf_counter() - t0
    sol.diagnostics["wall_time_s"] = wall
    if args.residual:
        sol.diagnostics["dpe_residual"] = dpe_residual(sol, cfg.foc_tol)
    out = io.save_solution(sol, args.out)
    if args.plot:
        from .plotting import plot_solution

        plot_solution(sol, out / "value_function.png")
    _emit({"out": str(out), "M": grid.M, "wall_time_s": wall, "min_phi": sol.min_value(),
           "eps": {bitstring(m, spec.N): e for m, e in sol.eps.items()},
           **({"dpe_residual": sol.diagnostics["dpe_residual"]} if args.residual else {})})
    return 0


def cmd_approximate(args) -> int:
    cfg, spec = io.load_config(args.config)
    levels = _ints(args.levels) if args.levels else list(cfg.levels)
    grid = _grid(args, cfg, spec)
    tol = args.tol_sup if args.tol_sup else cfg.tol_sup
    run = approximation.run_sequence(spec, levels, grid, tol, cfg.foc_tol)
    out = Path(args.out)
    io.save_solution(run.limit, out)
    rep = run.report()
    io.write_json(out / "convergence.json", rep)
    if args.plot:
        from .plotting import plot_convergence, plot_solution

        plot_convergence(rep, out / "convergence.png")
        plot_solution(run.limit, out / "value_function.png")
    _emit(rep)
    return 0


def cmd_strategy(args) -> int:
    from .strategy import admissibility_report, extract_strategy, foc_identity_error

    sol = io.load_solution(args.solution)
    sg = extract_strategy(sol, args.foc_tol)
    rep = admissibility_report(sg, sol, args.margin_floor).as_dict()
    rep["foc_identity_error"] = foc_identity_error(sg, sol)
    rep["max_foc_residual"] = max(float(np.nanmax(f)) for f in sg.foc.values())
    out = io.save_strategy(sg, args.out, rep)
    if args.plot:
        from .plotting import plot_strategy

        plot_strategy(sg, Path(out) / "strategy.png")
    _emit(rep)
    return 0


def cmd_simulate(args) -> int:
    from .simulation import estimate_objective, measure_identity_check, simulate_paths, terminal_log_wealth
    from .strategy import extract_strategy, zero_strategy

    sol = io.load_solution(args.solution)
    model = sol.model
    init = _parse_init(args.init)
    z = parse_bitstring(init["z"], model.N) if init["z"] is not None else 0
    a = model.index_of(init["i"])
    m = int(round(init["t"] / sol.grid.dt))
    if abs(m * sol.grid.dt - init["t"]) > 1e-9 or not 0 <= m <= sol.grid.M:
        raise ValueError(f"initial time {init['t']} is not a grid node")
    sg = zero_strategy(model, sol.grid) if args.strategy == "zero" else extract_strategy(sol)
    bundle = simulate_paths(model, init["t"], a, z, args.paths, args.seed)
    est = estimate_objective(model, sg, init["t"], init["i"], z, init["x"], args.paths, args.seed, bundle=bundle)
    vbar, _ = value_function(sol)
    solver_value = float(vbar[z][m, a])
    res = est.as_dict()
    res["solver_value"] = solver_value
    res["z_score"] = (est.value_form - solver_value) / est.se if est.se > 0 else None
    res["strategy"] = args.strategy
    if args.measure_check:
        res["measure_check"] = measure_identity_check(bundle, sg, model, init["x"])
    if args.per_path:
        logx = terminal_log_wealth(bundle, sg, model, init["x"])
        np.savetxt(args.per_path, np.column_stack([np.arange(logx.size), logx]), delimiter=",",
                   header="path,log_wealth", comments="", fmt=["%d", "%.17g"])
        if args.plot:
            from .plotting import plot_log_wealth

            plot_log_wealth(logx, Path(args.per_path).with_suffix(".png"))
    _emit(res)
    return 0


def cmd_bound(args) -> int:
    cfg, spec = io.load_config(args.config)
    levels = _ints(args.n)
    horizons = _floats(args.horizon) if args.horizon else [spec.T]
    rows = []
    for n in levels:
        regimes = [args.i] if args.i else range(1, n + 1)
        for s in horizons:
            vals = {str(i): approximation.error_bound(spec.generator, n, i, s, method=args.method) for i in regimes}
            rows.append({"n": n, "horizon": s, "bounds": vals})
    _emit({"label": approximation.BOUND_LABEL, "method": args.method, "results": rows})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rscredit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a model config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="solve a finite-regime model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--M", type=int)
    s.add_argument("--residual", action="store_true", help="also report the DPE residual")
    s.add_argument("--plot", action="store_true", help="write value_function.png")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("approximate", help="truncation sequence for a countable model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--levels", help="comma list, e.g. 4,8,16")
    s.add_argument("--M", type=int)
    s.add_argument("--tol-sup", dest="tol_sup", type=float)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_approximate)

    s = sub.add_parser("strategy", help="optimal strategy from a saved solution")
    s.add_argument("--solution", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--foc-tol", dest="foc_tol", type=float, default=1e-10)
    s.add_argument("--margin-floor", dest="margin_floor", type=float, default=1e-6)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_strategy)

    s = sub.add_parser("simulate", help="Monte Carlo estimate of the objective")
    s.add_argument("--solution", required=True)
    s.add_argument("--paths", type=int, default=100000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", default="t=0,i=1,x=1", help="t=..,i=..,z=..,x=..")
    s.add_argument("--strategy", choices=["solution", "zero"], default="solution")
    s.add_argument("--per-path", dest="per_path", help="CSV of terminal log-wealth per path")
    s.add_argument("--measure-check", dest="measure_check", action="store_true",
                   help="also compare wealth with the measure-change representation path by path")
    s.add_argument("--plot", action="store_true", help="histogram next to the per-path CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("bound", help="truncation escape probability")
    s.add_argument("--config", required=True)
    s.add_argument("--n", required=True, help="level(s): 8, 1-20 or 4,8,16")
    s.add_argument("--horizon", help="comma list of horizons s = T - t (default T)")
    s.add_argument("--i", type=int, help="single starting regime (default all i <= n)")
    s.add_argument("--method", choices=["expm", "series"], default="expm")
    s.set_defaults(func=cmd_bound)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report every failure as JSON
        err = {"error": type(exc).__name__, "message": str(exc)}
        report = getattr(exc, "report", None)
        if report is not None:
            err["issues"] = report.as_dict()["issues"]
        layer = getattr(exc, "layer", None)
        if layer is not None:
            err["layer"] = layer
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
