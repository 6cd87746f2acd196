"""Experiment campaigns behind the command-line harness.

Every campaign is deterministic given its seed: run ``i`` draws from
``SeedSequence([seed, i])`` and results are ordered by run index whatever
the worker pool does.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache, partial
from importlib.resources import files
from pathlib import Path

import numpy as np

from .exceptions import CaseError, GridStateError, UnobservableError
from .grid import GridCase, bundled_case, build_admittance, load_case
from .measurements import (DEFAULT_SIGMA, SWEEP_LABELS, SWEEP_ORDER, MeasurementPlan, MeasurementSet, align_phase,
                           crlb, fim, generate_plan, load_plan, simulate, sweep_plan, wls_cost)
from . import distributed as dist
from . import robust
from . import tracking
from .static import SolverOptions, gauss_newton, run_estimator

log = logging.getLogger(__name__)

DATA = files("gridstate") / "data"


# -- seeding, pools, CSV -------------------------------------------------------

def run_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for run ``index``: counter-based child of the global seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def map_runs(fn, n: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(n-1)]``, optionally on a process pool; order is by index."""
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n), chunksize=max(1, n // (4 * workers))))


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _parse(text: str):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def rows_to_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in ([r[h] for h in header] if isinstance(r, dict) else r)])
    return buf.getvalue()


def write_csv(path, header: list, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(header, rows))
    return path


def read_csv(source) -> list:
    """Rows of an emitted CSV as dicts with ints, floats and booleans restored."""
    text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
    return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# -- configuration ---------------------------------------------------------------

@dataclass
class ExperimentConfig:
    case: str = "ieee14"
    plan: str | None = None
    estimators: tuple = ("gn",)
    runs: int = 100
    seed: int = 0
    sigma: dict = field(default_factory=dict)
    out: str = "out"
    noiseless: bool = False
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.estimators, str):
            self.estimators = tuple(s.strip() for s in self.estimators.split(",") if s.strip())
        self.estimators = tuple(self.estimators)
        if self.runs < 1:
            raise CaseError("run count must be at least 1")
        if not self.estimators:
            raise CaseError("estimator list is empty")


@lru_cache(maxsize=16)
def _case_cached(name: str) -> GridCase:
    p = Path(name)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise CaseError(f"case not found: {name}")
        return load_case(p)
    try:
        return bundled_case(name)
    except (FileNotFoundError, CaseError):
        raise CaseError(f"case not found: {name}") from None


def resolve_case(name: str) -> GridCase:
    return _case_cached(str(name))


def resolve_plan(case: GridCase, spec: str | None, sigma: dict | None = None) -> MeasurementPlan:
    """Plan from a JSON path, a bundled plan name, or a generator expression."""
    model = build_admittance(case)
    if spec is None:
        spec = "full"
    p = Path(spec)
    if p.suffix == ".json":
        if not p.exists():
            bundled = DATA / p.name
            if not bundled.is_file():
                raise CaseError(f"plan not found: {spec}")
            p = bundled
        plan = load_plan(p, model)
        return plan
    return generate_plan(model, spec, sigma or None)


# -- measurement-type sweep ------------------------------------------------------

def draw_sweep_state(case: GridCase, rng) -> np.ndarray:
    """Magnitudes U[0.9, 1.1], angles U[-0.4 pi, 0.4 pi], rotated so the reference angle is 0."""
    n = case.n_bus
    v = rng.uniform(0.9, 1.1, n) * np.exp(1j * rng.uniform(-0.4 * np.pi, 0.4 * np.pi, n))
    return align_phase(v, case.ref_index)


def crlb_trace(plan: MeasurementPlan, v) -> tuple[float, bool]:
    """Trace of the reference-anchored bound, and whether the plan is observable at ``v``.

    For unobservable plans the anchored information matrix is pseudo-inverted,
    which only bounds the error within its range.
    """
    try:
        return float(np.trace(crlb(plan, v, anchored=True)).real), True
    except UnobservableError:
        J = fim(plan, v).real()
        n = plan.n_bus
        keep = np.delete(np.arange(2 * n), n + plan.model.case.ref_index)
        return float(np.trace(np.linalg.pinv(J[np.ix_(keep, keep)], rcond=1e-10))), False


def _sweep_run(index: int, case_name: str, steps: tuple, estimators: tuple, seed: int, sigma: dict,
               plan_spec: str | None, opts: SolverOptions | None) -> list:
    case = resolve_case(case_name)
    rng = run_rng(seed, index)
    v = draw_sweep_state(case, rng)
    ref = case.ref_index
    rows = []
    for k in steps:
        plan = _sweep_plan_cached(case_name, k, json.dumps(sigma, sort_keys=True), plan_spec)
        ms = simulate(plan, v, seed=rng)
        bound, obs = crlb_trace(plan, v)
        row = {"run": index, "step": k, "observable": obs, "crlb": bound}
        for name in estimators:
            try:
                est = run_estimator(name, ms, opts)
                row[f"{name}_se"] = float(np.sum(np.abs(align_phase(est.v_hat, ref) - v) ** 2))
            except GridStateError as exc:
                log.debug("run %d step %d %s failed: %s", index, k, name, exc)
                row[f"{name}_se"] = float("nan")
        rows.append(row)
    return rows


@lru_cache(maxsize=32)
def _sweep_plan_cached(case_name: str, k: int, sigma_key: str, plan_spec: str | None) -> MeasurementPlan:
    case = resolve_case(case_name)
    sigma = json.loads(sigma_key) or None
    if plan_spec is not None:
        return resolve_plan(case, plan_spec, sigma)
    return sweep_plan(build_admittance(case), k, sigma)


@dataclass
class SweepResult:
    per_run: list
    table: list
    estimators: tuple

    def run_header(self) -> list:
        return ["run", "step", "observable", "crlb"] + [f"{e}_se" for e in self.estimators]

    def table_header(self) -> list:
        cols = ["step", "label", "n_meas", "observable"]
        cols += [f"{e}_mse" for e in self.estimators] + ["crlb"]
        cols += [f"{e}_failures" for e in self.estimators]
        return cols


def montecarlo_sweep(runs: int = 100, seed: int = 0, estimators=("gn", "sdr", "fpp"), case: str = "ieee14",
                     steps=None, sigma: dict | None = None, plan: str | None = None, workers: int = 1,
                     opts: SolverOptions | None = None) -> SweepResult:
    """Monte-Carlo MSE against the CRLB over the cumulative measurement-type sweep.

    With ``plan`` given, the sweep collapses to that single plan (step 0).
    """
    sigma = dict(sigma or {})
    if plan is not None:
        steps = (0,)
    steps = tuple(range(1, len(SWEEP_ORDER) + 1)) if steps is None else tuple(steps)
    fn = partial(_sweep_run, case_name=case, steps=steps, estimators=tuple(estimators), seed=seed,
                 sigma=sigma, plan_spec=plan, opts=opts)
    per_run = [r for rows in map_runs(fn, runs, workers) for r in rows]
    table = []
    for k in steps:
        rows = [r for r in per_run if r["step"] == k]
        p = _sweep_plan_cached(case, k, json.dumps(sigma, sort_keys=True), plan)
        out = {"step": k, "label": "plan" if plan is not None else SWEEP_LABELS[k - 1], "n_meas": p.size,
               "observable": all(r["observable"] for r in rows),
               "crlb": float(np.mean([r["crlb"] for r in rows]))}
        for e in estimators:
            se = np.array([r[f"{e}_se"] for r in rows])
            ok = np.isfinite(se)
            out[f"{e}_mse"] = float(se[ok].mean()) if ok.any() else float("nan")
            out[f"{e}_failures"] = int((~ok).sum())
        table.append(out)
    gn = [r["gn_mse"] for r in table if "gn_mse" in r and r["observable"]]
    if any(b > a * (1 + 1e-12) for a, b in zip(gn, gn[1:])):
        log.warning("gn MSE is not monotone nonincreasing across the sweep")
    return SweepResult(per_run, table, tuple(estimators))


def crlb_check(result: SweepResult, slack: float = 0.05, z: float = 1.6448536269514722) -> list:
    """One-sided comparison of each estimator's MSE with the bound, per observable step.

    An estimator passes at a step when its mean squared error is not below
    ``(1 - slack)`` times the mean bound by more than ``z`` Monte-Carlo
    standard errors of the paired per-run differences.
    """
    out = []
    for row in result.table:
        if not row["observable"]:
            continue
        runs = [r for r in result.per_run if r["step"] == row["step"]]
        for e in result.estimators:
            se = np.array([r[f"{e}_se"] for r in runs])
            cb = np.array([r["crlb"] for r in runs])
            ok = np.isfinite(se)
            d = se[ok] - (1 - slack) * cb[ok]
            sem = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
            out.append({"step": row["step"], "estimator": e, "mse": row[f"{e}_mse"], "crlb": row["crlb"],
                        "margin": float(d.mean()), "sem": sem, "passes": bool(d.mean() >= -z * sem)})
    return out


# -- bad-data study ----------------------------------------------------------------

TABLE1_SCENARIOS = {
    "S0": (),
    "S1": (("pmu_i", (4, 7)),),
    "S2": (("pmu_i", (4, 7)), ("pmu_v", 5)),
    "S3": (("pmu_v", 5), ("pmu_i", (4, 7)), ("pmu_i", (10, 11))),
}
TABLE1_METHODS = ("ga_lse", "lse", "lnrt", "huber")


def _entry_index(plan: MeasurementPlan, kind: str, where) -> int:
    case = plan.model.case
    for i, e in enumerate(plan.entries):
        if e.kind != kind:
            continue
        if kind == "pmu_v" and e.location == where:
            return i
        if kind == "pmu_i" and e.location[0] == case.find_branch(*where) and e.location[1] == "from":
            return i
    raise CaseError(f"plan has no {kind} meter at {where}")


@lru_cache(maxsize=4)
def _fig3_plan(path: str | None) -> MeasurementPlan:
    case = bundled_case("ieee14")
    return load_plan(DATA / "fig3_plan.json" if path is None else path, build_admittance(case))


def draw_table1_state(n: int, rng, spread: float = 0.02) -> np.ndarray:
    """Magnitudes ``1 + spread U(-1,1)``, angles ``spread U(-1,1)`` radians."""
    return (1 + spread * rng.uniform(-1, 1, n)) * np.exp(1j * spread * rng.uniform(-1, 1, n))


def _table1_run(index: int, seed: int, plan_path: str | None, factor: float, spread: float,
                threshold: float, lam: float) -> list:
    plan = _fig3_plan(plan_path)
    rng = run_rng(seed, index)
    v = draw_table1_state(plan.n_bus, rng, spread)
    x = np.concatenate([v.real, v.imag])
    ms = simulate(plan, v, seed=rng)
    offsets = np.concatenate([[0], np.cumsum(np.where(plan.linear_mask, 2, 1))])
    rows = []
    for name, bad in TABLE1_SCENARIOS.items():
        idx = [_entry_index(plan, k, w) for k, w in bad]
        z = ms.z.copy()
        z[idx] *= factor
        model = robust.linear_model(MeasurementSet(plan, z))
        real_rows = [r for i in idx for r in range(offsets[i], offsets[i + 1])]
        est = {"ga_lse": robust.lse(model.drop(real_rows)), "lse": robust.lse(model)}
        try:
            est["lnrt"] = robust.lnr_iterate(model, threshold)[0]
        except UnobservableError:
            est["lnrt"] = np.full_like(x, np.nan)
        est["huber"] = robust.huber_solve(model, lam)[0]
        for m in TABLE1_METHODS:
            rows.append({"run": index, "scenario": name, "method": m, "error": float(np.linalg.norm(est[m] - x))})
    return rows


@dataclass
class Table1Result:
    per_run: list
    table: dict

    def long_rows(self) -> list:
        return [{"scenario": s, "method": m, "mean_error": self.table[s][m]}
                for s in TABLE1_SCENARIOS for m in TABLE1_METHODS]

    def wide_rows(self) -> list:
        return [dict(scenario=s, **{m: self.table[s][m] for m in TABLE1_METHODS}) for s in TABLE1_SCENARIOS]


def table1_study(runs: int = 1000, seed: int = 0, plan_path: str | None = None, factor: float = 1.2,
                 spread: float = 0.02, threshold: float = 3.0, lam: float = 1.34, workers: int = 1) -> Table1Result:
    """GA-LSE, LSE, LNR-test and Huber on the four-area PMU plan under scenarios S0-S3.

    Corruption scales each affected phasor reading by ``factor``; the error
    is the Euclidean distance in ``[Re v; Im v]``, averaged over runs.
    """
    fn = partial(_table1_run, seed=seed, plan_path=plan_path, factor=factor, spread=spread,
                 threshold=threshold, lam=lam)
    per_run = [r for rows in map_runs(fn, runs, workers) for r in rows]
    table = {s: {} for s in TABLE1_SCENARIOS}
    for s in TABLE1_SCENARIOS:
        for m in TABLE1_METHODS:
            e = np.array([r["error"] for r in per_run if r["scenario"] == s and r["method"] == m])
            table[s][m] = float(np.nanmean(e))
    return Table1Result(per_run, table)


def table1_check(table: dict) -> dict:
    s0 = list(table["S0"].values())
    out = {"S0_spread": max(s0) / min(s0) - 1.0}
    for s in ("S2", "S3"):
        t = table[s]
        out[f"{s}_lse_over_ga"] = t["lse"] / t["ga_lse"]
        out[f"{s}_huber_over_lnrt"] = t["huber"] / t["lnrt"]
        out[f"{s}_huber_over_lse"] = t["huber"] / t["lse"]
    out["passes"] = bool(out["S0_spread"] <= 0.05 and all(
        out[f"{s}_lse_over_ga"] >= 3 and out[f"{s}_huber_over_lnrt"] <= 1.2 and out[f"{s}_huber_over_lse"] <= 0.35
        for s in ("S2", "S3")))
    return out


# -- consensus traces --------------------------------------------------------------

@dataclass
class ConsensusRun:
    partition: dist.AreaPartition
    plain: dist.ADMMResult
    robust: dist.ADMMResult | None
    x_central: np.ndarray
    x_true: np.ndarray
    summary: dict


def _summarize(part, res: dist.ADMMResult, level: float) -> dict:
    anti = dist.check_antisymmetry(res.trace)
    log.info("antisymmetry check: holds=%s max_violation=%.3g over %d iterations",
             anti["holds"], anti["max_violation"], len(anti["per_iteration"]))
    last_kc = res.trace.e_kc[-1] if res.trace.e_kc else None
    return {
        "iterations": res.iterations,
        "converged": bool(res.converged),
        "iterations_to_truth_level": res.trace.first_below("e_ko", level) if res.trace.e_ko else None,
        "iterations_to_central_level": res.trace.first_below("e_kc", level) if res.trace.e_kc else None,
        "final_max_e_kc": None if last_kc is None else float(np.max(last_kc)),
        "final_mean_e_ko": float(np.mean(res.trace.e_ko[-1])) if res.trace.e_ko else None,
        "final_residual": float(res.trace.residual[-1]),
        "antisymmetry_holds": bool(anti["holds"]),
        "antisymmetry_max_violation": anti["max_violation"],
        "locality_holds": bool(dist.check_locality(res.trace, part)),
        "diverged": bool(res.trace.diagnostics.get("diverged", False)),
    }


def consensus_experiment(part: dist.AreaPartition, models: list, x_true: np.ndarray, mu: float, iters: int,
                         tol: float = 1e-8, robust_lam: float | None = 1.34, rho: float = 1.0,
                         level: float = 1e-3) -> ConsensusRun:
    x_c = dist.centralized_lse(part, models)
    plain = dist.admm_consensus(part, models, opts=dist.ADMMOptions(mu=mu, max_iter=iters, tol=tol),
                                x_central=x_c, x_true=x_true)
    summary = {"areas": part.K, "buses": part.case.n_bus, "mu": mu, "admm": _summarize(part, plain, level)}
    rob = None
    if robust_lam is not None:
        rob = dist.admm_robust(part, models, robust_lam,
                               dist.ADMMOptions(mu=mu, rho=rho, max_iter=iters, tol=tol, store_multipliers=True),
                               x_true=x_true)
        summary["admm_robust"] = _summarize(part, rob, level)
    return ConsensusRun(part, plain, rob, x_c, x_true, summary)


def fig3_system(seed=0, plan_path=None, partition_path=None):
    case = bundled_case("ieee14")
    plan = _fig3_plan(plan_path)
    part = dist.partition(case, DATA / "fig3_partition.json" if partition_path is None else partition_path, plan)
    rng = np.random.default_rng(seed)
    v = draw_table1_state(case.n_bus, rng)
    ms = simulate(plan, v, seed=rng)
    return part, dist.area_models(part, ms), np.concatenate([v.real, v.imag])


def consensus_14(seed=0, mu: float = 1e4, iters: int = 200) -> ConsensusRun:
    part, models, x = fig3_system(seed)
    return consensus_experiment(part, models, x, mu, iters, level=1e-4)


def consensus_4200(seed=0, mu: float = 1e5, iters: int = 30, sigma: float = 0.005,
                   robust_lam: float | None = None) -> ConsensusRun:
    g = dist.build_14x300(seed, sigma)
    return consensus_experiment(g.partition, g.models, g.x_true, mu, iters, robust_lam=robust_lam)


def sdr_118(seed=0, mu: float = 1e3, iters: int = 25, sigma: float = 0.01,
            spec: str = "vmag2_all + pflow_both_ends + qflow_both_ends", with_central: bool = True):
    """Three-area distributed relaxation on the 118-bus system at its operating point.

    ``with_central=False`` skips the centralized reference solve (the matrix
    error column of the trace is then empty).
    """
    from .static import sdr_solve
    case = bundled_case("ieee118")
    model = build_admittance(case)
    plan = generate_plan(model, spec, {k: sigma for k in ("vmag2", "p_flow", "q_flow")})
    part = dist.partition(case, DATA / "ieee118_3area.json", plan)
    v = case.operating_point()
    ms = simulate(plan, v, seed=seed)
    central = sdr_solve(ms) if with_central else None
    res = dist.distributed_sdr(part, ms, mu=mu, max_iter=iters, V_central=None if central is None else central.V_hat,
                               v_true=v)
    return part, res, central


# -- tracking ---------------------------------------------------------------------

def load_scenario(source) -> dict:
    if isinstance(source, dict):
        doc = dict(source)
    else:
        p = Path(source)
        if not p.exists():
            bundled = DATA / p.name
            if not bundled.is_file():
                raise CaseError(f"scenario not found: {source}")
            p = bundled
        doc = json.loads(Path(p).read_text())
    for key in ("case", "steps", "trajectory"):
        if key not in doc:
            raise CaseError(f"scenario lacks {key!r}")
    if int(doc["steps"]) < 1:
        raise CaseError("scenario needs at least one step")
    return doc


def trajectory(case: GridCase, spec: dict, steps: int) -> np.ndarray:
    """True states, one row per step, starting from the case's operating point."""
    v0 = case.operating_point()
    vm, va = np.abs(v0), np.angle(v0)
    kind = spec.get("kind", "ramp")
    t = np.arange(steps + 1)[:, None]
    if kind == "static":
        return np.tile(v0, (steps + 1, 1))
    if kind != "ramp":
        raise CaseError(f"unknown trajectory kind {kind!r}")
    ref = case.ref_index
    dm = float(spec.get("vm_rate", 0.0)) * np.ones(case.n_bus)
    da = float(spec.get("va_rate", 0.0)) * np.ones(case.n_bus)
    da[ref] = 0.0
    return (vm + dm * t) * np.exp(1j * (va + da * t))


def _err(v_hat, v, ref) -> float:
    return float(np.linalg.norm(align_phase(v_hat, ref) - align_phase(v, ref)))


TRACK_HEADER = ["t", "method", "state_error", "cost", "regret"]
TRACKERS = ("online", "ekf", "mhe")


def track_scenario(scenario, trackers=TRACKERS, seed: int = 0, checkpoints=None) -> dict:
    """Run trackers on one measurement stream.

    Returns per-step rows ``(t, method, state_error, cost, regret)`` and the
    online regret at the checkpoints.  ``cost`` is the WLS cost of the
    estimate (the round loss for the online tracker); ``regret`` is filled
    on online rows at checkpoints only, since each value needs a hindsight
    SDP.  A per-snapshot Gauss-Newton baseline is reported as ``static``.
    """
    sc = load_scenario(scenario)
    unknown = set(trackers) - set(TRACKERS)
    if unknown:
        raise CaseError(f"unknown tracker(s) {sorted(unknown)}; choose from {list(TRACKERS)}")
    case = resolve_case(sc["case"])
    plan = resolve_plan(case, sc.get("plan"), sc.get("sigma"))
    T = int(sc["steps"])
    vs = trajectory(case, sc["trajectory"], T)
    rng = np.random.default_rng(seed)
    sets = [simulate(plan, vs[t], seed=rng, t=t) for t in range(T + 1)]
    ref = case.ref_index
    opts = sc.get("trackers", {})
    v0 = gauss_newton(sets[0]).v_hat
    nan = float("nan")

    def row(t, method, v_hat, cost=None):
        return {"t": t, "method": method, "state_error": _err(v_hat, vs[t], ref),
                "cost": wls_cost(sets[t], v_hat) if cost is None else cost, "regret": nan}

    rows = [row(t, "static", gauss_newton(sets[t], v0).v_hat) for t in range(1, T + 1)]
    regret = []
    if "online" in trackers:
        o = opts.get("online", {})
        c = o.get("c")
        if c is None:
            c = float(o.get("c_scale", 1.0)) * tracking.default_step_constant(sets[0])
        tr = tracking.OnlineTracker(np.outer(v0, v0.conj()), c)
        online_rows = []
        for t in range(1, T + 1):
            v_hat = tr.step(sets[t])
            online_rows.append(row(t, "online", v_hat, tr.losses[-1]))
        for cp in (checkpoints or sc.get("checkpoints", [50, T])):
            cp = int(cp)
            rep = tracking.regret_report(tr, cp)
            online_rows[cp - 1]["regret"] = rep["regret"]
            regret.append({"T": cp, "regret": rep["regret"], "regret_per_round": rep["regret"] / cp,
                           "tracker_loss": rep["tracker_loss"], "best_fixed_loss": rep["best_fixed_loss"]})
        rows += online_rows
    if "ekf" in trackers:
        o = opts.get("ekf", {})
        n = case.n_bus
        ekf = tracking.HoltEKF(v0, float(o.get("p0", 1e-4)) * np.eye(2 * n), float(o.get("q", 1e-6)) * np.eye(2 * n),
                               float(o.get("alpha", 0.8)), float(o.get("beta", 0.5)))
        rows += [row(t, "ekf", ekf.step(sets[t])) for t in range(1, T + 1)]
    if "mhe" in trackers:
        o = opts.get("mhe", {})
        L = int(o.get("window", 3))
        lam = float(o.get("lam", 1e4))
        holt = tracking.HoltSmoother(float(o.get("alpha", 0.8)), float(o.get("beta", 0.5)))
        hist = [v0]
        holt.update(v0)
        # trans[s] maps the estimate at s to the forecast of s+1; each is fitted near its own state
        trans = [(np.eye(case.n_bus), np.zeros(case.n_bus, complex))]
        for t in range(1, T + 1):
            trans.append(holt.transition())
            if t < L:
                v_hat = gauss_newton(sets[t], hist[-1]).v_hat
            else:
                Fs, gs = zip(*trans[t - L:t])
                path = tracking.mhe_solve(sets[t - L:t + 1], list(Fs), hist[t - L], lam,
                                          mode=o.get("mode", "gn"), gs=list(gs))
                v_hat = path[-1]
            if not plan.has_pmu:
                # phaseless readings leave the absolute angle free; keep the reference convention
                v_hat = align_phase(v_hat, ref)
            hist.append(v_hat)
            holt.update(v_hat)
            rows.append(row(t, "mhe", v_hat))
    return {"rows": rows, "regret": regret}


def steady_state_error(rows: list, method: str, tail: int = 50) -> float:
    e = [r["state_error"] for r in rows if r["method"] == method]
    return float(np.mean(e[-tail:]))


__all__ = [
    "ExperimentConfig", "run_rng", "map_runs", "rows_to_csv", "write_csv", "read_csv", "write_json",
    "resolve_case", "resolve_plan", "montecarlo_sweep", "crlb_check", "crlb_trace", "table1_study",
    "table1_check", "consensus_14", "consensus_4200", "consensus_experiment", "sdr_118", "track_scenario",
    "load_scenario", "trajectory", "steady_state_error", "TABLE1_SCENARIOS", "TABLE1_METHODS", "DEFAULT_SIGMA",
]
