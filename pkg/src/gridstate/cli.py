"""``gridstate`` command-line front end.

Exit codes: 0 ok, 1 solver failure (or non-convergence under ``--strict``),
2 input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import CaseError, GridStateError
from . import experiments as ex
from .measurements import align_phase, set_from_csv, set_to_csv, simulate
from .static import SolverOptions, run_estimator

log = logging.getLogger("gridstate")

EXIT_OK, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2


class NotConverged(GridStateError):
    pass


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _truth(case, rng):
    v = case.operating_point()
    return ex.draw_sweep_state(case, rng) if v is None else v


# -- commands -------------------------------------------------------------------

def cmd_estimate(args) -> int:
    case = ex.resolve_case(args.case)
    plan = ex.resolve_plan(case, args.plan)
    out = _out(args)
    rng = np.random.default_rng(args.seed)
    v_true = _truth(case, rng)
    if args.readings:
        p = Path(args.readings)
        if not p.exists():
            raise CaseError(f"readings not found: {p}")
        mset = set_from_csv(p.read_text(), plan)
        v_true = None
    else:
        mset = simulate(plan, v_true, seed=rng, noiseless=args.noiseless)
        (out / "measurements.csv").write_text(set_to_csv(mset))
    bad = []
    for name in _list(args.est, "gn"):
        est = run_estimator(name, mset, SolverOptions(seed=args.seed))
        doc = est.to_dict()
        doc["max_abs_residual"] = float(np.max(np.abs(est.residuals)))
        if v_true is not None:
            ref = case.ref_index
            doc["error_to_truth"] = float(np.linalg.norm(align_phase(est.v_hat, ref) - align_phase(v_true, ref)))
        ex.write_json(out / f"estimate_{name}.json", doc)
        log.info("%s: cost %.6g, %d iterations, converged=%s", name, est.cost, est.iterations, est.converged)
        if not est.converged:
            bad.append(name)
    if bad and args.strict:
        raise NotConverged(f"not converged: {', '.join(bad)}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    out = _out(args)
    res = ex.montecarlo_sweep(args.runs or 100, args.seed, _list(args.est, "gn,sdr,fpp"), args.case,
                              plan=args.plan, workers=args.workers)
    ex.write_csv(out / "montecarlo_runs.csv", res.run_header(), res.per_run)
    ex.write_csv(out / "montecarlo.csv", res.table_header(), res.table)
    check = ex.crlb_check(res)
    ex.write_csv(out / "crlb_check.csv", ["step", "estimator", "mse", "crlb", "margin", "sem", "passes"], check)
    for r in res.table:
        log.info("step %s (%s): %s crlb=%.4g", r["step"], r["label"],
                 " ".join(f"{e}={r[f'{e}_mse']:.4g}" for e in res.estimators), r["crlb"])
    if args.plot:
        from .plotting import plot_sweep
        plot_sweep(out / "montecarlo.csv", out / "montecarlo.png")
    failures = sum(r[f"{e}_failures"] for r in res.table if r["observable"] for e in res.estimators)
    if failures and args.strict:
        raise NotConverged(f"{failures} estimator failures at observable steps")
    return EXIT_OK


def cmd_baddata(args) -> int:
    out = _out(args)
    plan = str(_data_path(args.plan, "plan")) if args.plan else None
    if args.case not in ("ieee14",) and not str(args.case).endswith("ieee14.json"):
        raise CaseError("the bad-data study runs on the 14-bus case")
    res = ex.table1_study(args.runs or 1000, args.seed, plan, workers=args.workers)
    ex.write_csv(out / "baddata_runs.csv", ["run", "scenario", "method", "error"], res.per_run)
    ex.write_csv(out / "baddata_long.csv", ["scenario", "method", "mean_error"], res.long_rows())
    ex.write_csv(out / "baddata.csv", ["scenario", *ex.TABLE1_METHODS], res.wide_rows())
    ex.write_json(out / "baddata_checks.json", ex.table1_check(res.table))
    for r in res.wide_rows():
        log.info("%s: %s", r["scenario"], " ".join(f"{m}={r[m]:.4f}" for m in ex.TABLE1_METHODS))
    if args.plot:
        from .plotting import plot_baddata
        plot_baddata(out / "baddata.csv", out / "baddata.png")
    return EXIT_OK


def _consensus_inputs(args):
    from . import distributed as dist
    if args.case == "14x300":
        g = dist.build_14x300(args.seed, args.sigma or 0.005)
        return g.partition, g.models, g.x_true
    case = ex.resolve_case(args.case)
    plan = ex.resolve_plan(case, args.plan or "fig3_plan.json")
    part_src = args.partition or ("fig3_partition.json" if case.n_bus == 14 else None)
    if part_src is None:
        raise CaseError("--partition is required for this case")
    part = dist.partition(case, _data_path(part_src, "partition"), plan)
    rng = np.random.default_rng(args.seed)
    v = ex.draw_table1_state(case.n_bus, rng) if case.operating_point() is None or case.n_bus == 14 \
        else case.operating_point()
    ms = simulate(plan, v, seed=rng)
    return part, dist.area_models(part, ms), np.concatenate([v.real, v.imag])


def _data_path(name, what):
    p = Path(name)
    if p.exists():
        return p
    bundled = ex.DATA / p.name
    if bundled.is_file():
        return bundled
    raise CaseError(f"{what} not found: {name}")


def cmd_distributed(args) -> int:
    from . import distributed as dist
    out = _out(args)
    methods = _list(args.est, "admm,robust")
    unknown = set(methods) - {"admm", "robust", "sdr"}
    if unknown:
        raise CaseError(f"unknown distributed method(s) {sorted(unknown)}")
    summary = {}
    not_conv = []
    if "admm" in methods or "robust" in methods:
        part, models, x_true = _consensus_inputs(args)
        mu = args.mu or (1e5 if args.case == "14x300" else 1e4)
        iters = args.iters or (30 if args.case == "14x300" else 200)
        run = ex.consensus_experiment(part, models, x_true, mu, iters,
                                      robust_lam=1.34 if "robust" in methods else None,
                                      level=1e-3 if args.case == "14x300" else 1e-4)
        if "admm" in methods:
            (out / "trace_admm.csv").write_text(run.plain.trace.to_csv())
            summary["admm"] = run.summary["admm"]
            if not run.plain.converged:
                not_conv.append("admm")
        if "robust" in methods:
            (out / "trace_robust.csv").write_text(run.robust.trace.to_csv())
            summary["admm_robust"] = run.summary["admm_robust"]
            if not run.robust.converged:
                not_conv.append("admm_robust")
        summary.update(areas=part.K, buses=part.case.n_bus, mu=mu)
        summary["topology"] = {k: v for k, v in dist.validate_overlap_topology(part).items()
                               if k in ("as4_holds", "as5_holds")}
    if "sdr" in methods:
        from .static import sdr_solve
        case = ex.resolve_case(args.case)
        plan = ex.resolve_plan(case, args.plan or "vmag2_all + pflow_both_ends + qflow_both_ends",
                               {k: args.sigma or 0.01 for k in ("vmag2", "p_flow", "q_flow")})
        part_src = args.partition or ("ieee118_3area.json" if case.n_bus == 118 else None)
        if part_src is None:
            raise CaseError("--partition is required for this case")
        part = dist.partition(case, _data_path(part_src, "partition"), plan)
        v = _truth(case, np.random.default_rng(args.seed))
        ms = simulate(plan, v, seed=args.seed)
        central = sdr_solve(ms)
        res = dist.distributed_sdr(part, ms, mu=args.mu or 1e3, max_iter=args.iters or 25,
                                   V_central=central.V_hat, v_true=v)
        (out / "trace_sdr.csv").write_text(res.trace.to_csv())
        summary["sdr"] = {"iterations": res.trace.iterations, "final_state_error": [float(e) for e in res.trace.e_v[-1]],
                          "final_matrix_error": [float(e) for e in res.trace.e_V[-1]],
                          "final_residual": float(res.trace.residual[-1]),
                          "as4_holds": res.topology["as4_holds"], "as5_holds": res.topology["as5_holds"]}
    ex.write_json(out / "distributed_summary.json", summary)
    for k, s in summary.items():
        if isinstance(s, dict) and "antisymmetry_holds" in s:
            log.info("%s: antisymmetry holds=%s (max violation %.3g); %d iterations", k, s["antisymmetry_holds"],
                     s["antisymmetry_max_violation"], s["iterations"])
    if args.plot:
        from .plotting import plot_trace
        for name in ("admm", "robust"):
            if (out / f"trace_{name}.csv").exists():
                plot_trace(out / f"trace_{name}.csv", out / f"trace_{name}.png")
        if (out / "trace_sdr.csv").exists():
            plot_trace(out / "trace_sdr.csv", out / "trace_sdr.png", ("matrix_error", "state_error"))
    if not_conv and args.strict:
        raise NotConverged(f"not converged within the iteration cap: {', '.join(not_conv)}")
    return EXIT_OK


def cmd_track(args) -> int:
    out = _out(args)
    scenario = ex.load_scenario(args.scenario)
    res = ex.track_scenario(scenario, _list(args.est, ",".join(ex.TRACKERS)), seed=args.seed)
    ex.write_csv(out / "track.csv", ex.TRACK_HEADER, res["rows"])
    ex.write_csv(out / "regret.csv", ["T", "regret", "regret_per_round", "tracker_loss", "best_fixed_loss"],
                 res["regret"])
    methods = list(dict.fromkeys(r["method"] for r in res["rows"]))
    ex.write_json(out / "track_summary.json",
                  {"steady_state_error": {m: ex.steady_state_error(res["rows"], m) for m in methods},
                   "regret": res["regret"]})
    if args.plot:
        from .plotting import plot_tracking
        plot_tracking(out / "track.csv", out / "track.png")
    return EXIT_OK


def cmd_crlb(args) -> int:
    from .measurements import crlb
    out = _out(args)
    case = ex.resolve_case(args.case)
    plan = ex.resolve_plan(case, args.plan)
    v = _truth(case, np.random.default_rng(args.seed))
    bound, observable = ex.crlb_trace(plan, v)
    rows = []
    if observable:
        C = crlb(plan, v, anchored=True)
        rows = [{"bus": b, "variance": float(C[i, i].real)} for i, b in enumerate(case.bus_ids)]
    ex.write_csv(out / "crlb.csv", ["bus", "variance"], rows)
    ex.write_json(out / "crlb.json", {"trace": bound, "observable": observable, "n_meas": plan.size})
    log.info("CRLB trace %.6g (observable=%s)", bound, observable)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "montecarlo": cmd_montecarlo, "baddata": cmd_baddata,
            "distributed": cmd_distributed, "track": cmd_track, "crlb": cmd_crlb}


def _list(text, default):
    return tuple(s.strip() for s in (text or default).split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridstate", description="Power-system state estimation experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--case", default="ieee14", help="case JSON path, bundled case name, or 14x300 (distributed)")
    p.add_argument("--plan", help="plan JSON path or generator expression, e.g. 'vmag2_all + pflow_both_ends'")
    p.add_argument("--partition", help="partition JSON path")
    p.add_argument("--scenario", default="ramp_ieee14.json", help="trajectory scenario JSON (track)")
    p.add_argument("--readings", help="measurement CSV to use instead of simulating (estimate)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--est", help="comma-separated estimators, methods or trackers")
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 1 on solver non-convergence")
    p.add_argument("--plot", action="store_true", help="also render PNG figures from the CSVs (needs matplotlib)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mu", type=float, help="ADMM penalty (distributed)")
    p.add_argument("--iters", type=int, help="ADMM iteration cap (distributed)")
    p.add_argument("--sigma", type=float, help="noise override (distributed)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.runs is not None and args.runs < 1:
        print("error: run count must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (CaseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GridStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
