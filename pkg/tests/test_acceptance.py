"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from conftest import random_state
from gridstate import distributed as dist
from gridstate import experiments as ex
from gridstate import robust
from gridstate.grid import build_admittance, bundled_case
from gridstate.measurements import align_phase, evaluate_real, fim, generate_plan, real_jacobian, simulate
from gridstate.static import fpp_solve, gauss_newton, sdr_cost, sdr_cost_gradient, sdr_solve
from gridstate.tracking import (DynamicsModel, LinearObservation, TrackerState, ekf_step, project_psd)

RESULTS = []


def report(num: int, name: str, ok: bool, detail: str, t0: float):
    line = f"[{'PASS' if ok else 'FAIL'}] AC{num:02d} {name}: {detail} ({time.perf_counter() - t0:.1f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def case14():
    return bundled_case("ieee14")


@pytest.fixture(scope="module")
def model14(case14):
    return build_admittance(case14)


def test_ac01_fim_null_direction(model14):
    t0 = time.perf_counter()
    plan = generate_plan(model14, "full")
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(20):
        v = random_state(14, rng, 0.3)
        info = fim(plan, v)
        worst = max(worst, info.null_residual() / (np.linalg.norm(info.F, 2) * np.linalg.norm(v)))
    report(1, "FIM rank deficiency", worst <= 1e-9, f"max relative ||F [v; -v*]|| = {worst:.2e} (<= 1e-9)", t0)


def test_ac02_noiseless_recovery(case14, model14):
    t0 = time.perf_counter()
    plan = generate_plan(model14, "full")
    rng = np.random.default_rng(102)
    ref = case14.ref_index
    e_gn = e_fpp = c_sdr = 0.0
    for _ in range(2):
        v = align_phase(random_state(14, rng, 0.15), ref)
        ms = simulate(plan, v, noiseless=True)
        e_gn = max(e_gn, np.abs(align_phase(gauss_newton(ms).v_hat, ref) - v).max())
        e_fpp = max(e_fpp, np.abs(align_phase(fpp_solve(ms).v_hat, ref) - v).max())
        c_sdr = max(c_sdr, sdr_cost(ms, sdr_solve(ms).V_hat))
    ok = e_gn <= 1e-6 and e_fpp <= 1e-6 and c_sdr <= 1e-8
    report(2, "noiseless recovery", ok,
           f"GN err {e_gn:.1e}, FPP err {e_fpp:.1e} (<= 1e-6); SDR cost {c_sdr:.1e} (<= 1e-8)", t0)


def test_ac03_radial_rank_one():
    t0 = time.perf_counter()
    case = bundled_case("radial6")
    plan = generate_plan(build_admittance(case), "vmag2_all + pflow_from + qflow_from")
    v = align_phase(random_state(case.n_bus, np.random.default_rng(103), 0.1), case.ref_index)
    lam = np.linalg.eigvalsh(sdr_solve(simulate(plan, v, noiseless=True)).V_hat)
    ratio = lam[-2] / lam[-1]
    report(3, "radial rank-one relaxation", ratio <= 1e-6, f"lambda2/lambda1 = {ratio:.1e} (<= 1e-6)", t0)


def test_ac04_crlb_benchmark():
    t0 = time.perf_counter()
    res = ex.montecarlo_sweep(runs=100, seed=0)
    checks = ex.crlb_check(res)
    full = res.table[-1]
    db = 10 * np.log10(full["gn_mse"] / full["crlb"])
    bad = [(c["step"], c["estimator"]) for c in checks if not c["passes"]]
    ok = not bad and db <= 3.0
    report(4, "CRLB benchmarking", ok,
           f"{len(checks) - len(bad)}/{len(checks)} (step, estimator) pairs above the bound; "
           f"GN at full plan {db:+.2f} dB over CRLB (<= 3 dB)", t0)


def test_ac05_chi_square_mean():
    t0 = time.perf_counter()
    plan = ex._fig3_plan(None)
    rng = np.random.default_rng(105)
    stats = []
    for _ in range(1000):
        v = ex.draw_table1_state(plan.n_bus, rng)
        model = robust.linear_model(simulate(plan, v, seed=rng))
        stats.append(robust.chi_square_test(model).statistic)
    dof = model.M - model.N
    rel = abs(np.mean(stats) / dof - 1)
    report(5, "chi-square residual mean", rel <= 0.05,
           f"mean ||r||^2 = {np.mean(stats):.2f} vs M-N = {dof} ({100 * rel:.1f}% <= 5%)", t0)


def test_ac06_lnr_leave_one_out():
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    hits = 0
    for _ in range(50):
        M = int(rng.integers(8, 26))
        N = int(rng.integers(2, min(8, M - 3)))
        model = robust.LinearModel(rng.normal(size=(M, N)), rng.normal(size=M))
        rn, _ = robust.normalized_residuals(model)
        hits += int(np.nanargmax(rn) == np.argmin(robust.leave_one_out_errors(model)))
    report(6, "LNR equals leave-one-out", hits == 50, f"{hits}/50 argmax/argmin matches", t0)


def test_ac07_table1():
    t0 = time.perf_counter()
    res = ex.table1_study(runs=1000, seed=0)
    chk = ex.table1_check(res.table)
    detail = (f"S0 spread {100 * chk['S0_spread']:.1f}%; "
              + "; ".join(f"{s}: LSE/GA {chk[f'{s}_lse_over_ga']:.2f}, Huber/LNRT {chk[f'{s}_huber_over_lnrt']:.2f}, "
                          f"Huber/LSE {chk[f'{s}_huber_over_lse']:.2f}" for s in ("S2", "S3")))
    report(7, "bad-data table orderings", chk["passes"], detail, t0)


def test_ac08_stealth_invisible():
    t0 = time.perf_counter()
    plan = ex._fig3_plan(None)
    rng = np.random.default_rng(108)
    model = robust.linear_model(simulate(plan, ex.draw_table1_state(plan.n_bus, rng), seed=rng))
    base_chi = robust.chi_square_test(model).statistic
    base_lnr = robust.lnr_test(model).statistic
    worst = 0.0
    for _ in range(20):
        o = robust.stealth_attack(model, rng.normal(scale=0.05, size=model.N))
        att = model.with_z(model.z + o)
        worst = max(worst, abs(robust.chi_square_test(att).statistic - base_chi),
                    abs(robust.lnr_test(att).statistic - base_lnr))
    report(8, "stealth attacks invisible", worst <= 1e-9, f"max statistic change {worst:.1e} (<= 1e-9)", t0)


def test_ac09_admm_consensus():
    t0 = time.perf_counter()
    r14 = ex.consensus_14(seed=0)
    s14 = r14.summary["admm"]
    it14 = r14.plain.trace.first_below("e_kc", 1e-4)
    anti = max(dist.check_antisymmetry(r14.plain.trace)["max_violation"],
               dist.check_antisymmetry(r14.robust.trace)["max_violation"])
    r4200 = ex.consensus_4200(seed=0)
    it4200 = r4200.summary["admm"]["iterations_to_truth_level"]
    anti = max(anti, r4200.summary["admm"]["antisymmetry_max_violation"])
    ok = it14 is not None and it14 <= 200 and anti <= 1e-12 and it4200 is not None and it4200 <= 20
    report(9, "ADMM consensus", ok,
           f"14-bus max e_kc <= 1e-4 at iteration {it14} (<= 200, final {s14['final_max_e_kc']:.1e}); "
           f"antisymmetry violation {anti:.1e} (<= 1e-12); 4,200-bus mean e_ko <= 1e-3 at iteration {it4200} (<= 20)",
           t0)


def test_ac10_distributed_sdr():
    t0 = time.perf_counter()
    _, res, _ = ex.sdr_118(seed=0, with_central=False)
    hit = next((i + 1 for i, e in enumerate(res.trace.e_v) if np.max(e) <= 3e-2), None)
    final = np.max(res.trace.e_v[-1])
    report(10, "distributed SDR on 118 buses", hit is not None and hit <= 25,
           f"all areas <= 3e-2 from iteration {hit} (<= 25); max error at 25: {final:.3g}", t0)


def test_ac11_tracking():
    t0 = time.perf_counter()
    # linear scalar model in each real coordinate against the textbook recursions
    rng = np.random.default_rng(111)
    f, q, r = 0.95, 2e-3, 5e-2
    dyn = DynamicsModel([[f]], [0.01 + 0.0j], q * np.eye(2))
    tr = TrackerState(np.array([0.2 + 0.0j]), np.eye(2))
    x, P, kf = np.array([0.2, 0.0]), np.ones(2), 0.0
    for _ in range(100):
        z = rng.normal(size=2)
        ekf_step(tr, LinearObservation(np.eye(2), z, r * np.eye(2)), dyn)
        xp, Pp = f * x + np.array([0.01, 0.0]), f * f * P + q
        K = Pp / (Pp + r)
        x, P = xp + K * (z - xp), (1 - K) * Pp
        kf = max(kf, np.abs(tr.x - x).max(), np.abs(np.diag(tr.P) - P).max())
    proj = 0.0
    for _ in range(100):
        A = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        X = A + A.conj().T
        lam, U = np.linalg.eigh(X)
        proj = max(proj, np.abs(project_psd(X) - (U * np.clip(lam, 0, None)) @ U.conj().T).max())
    out = ex.track_scenario("ramp_ieee14.json", trackers=("online",), seed=0, checkpoints=[50, 200])
    per = {r["T"]: r["regret_per_round"] for r in out["regret"]}
    ok = kf <= 1e-10 and proj <= 1e-10 and per[200] < per[50]
    report(11, "tracking", ok,
           f"KF gap {kf:.1e}, projection gap {proj:.1e} (<= 1e-10); R(200)/200 = {per[200]:.3g} "
           f"< R(50)/50 = {per[50]:.3g}", t0)


def _fd_real_jacobian(plan, v, h=1e-6):
    x = np.concatenate([v.real, v.imag])
    n = len(v)
    cols = []
    for j in range(2 * n):
        d = np.zeros(2 * n)
        d[j] = h
        xp, xm = x + d, x - d
        cols.append((evaluate_real(plan, xp[:n] + 1j * xp[n:]) - evaluate_real(plan, xm[:n] + 1j * xm[n:])) / (2 * h))
    return np.array(cols).T


def test_ac12_derivatives(model14):
    t0 = time.perf_counter()
    plan = generate_plan(model14, "full + pflow_to + qflow_to + pmu_v_all + pmu_i_from")
    rng = np.random.default_rng(112)
    jac = 0.0
    for _ in range(100):
        v = random_state(14, rng, 0.3)
        J = real_jacobian(plan, v)
        jac = max(jac, np.abs(J - _fd_real_jacobian(plan, v)).max() / max(1.0, np.abs(J).max()))
    scada = generate_plan(model14, "full")
    ms = simulate(scada, random_state(14, rng), seed=rng)
    grad, h = 0.0, 1e-6
    for _ in range(20):
        u = random_state(14, rng, 0.3)
        V = np.outer(u, u.conj())
        B = rng.normal(size=(14, 14)) + 1j * rng.normal(size=(14, 14))
        D = B + B.conj().T
        fd = (sdr_cost(ms, V + h * D) - sdr_cost(ms, V - h * D)) / (2 * h)
        an = float(np.real(np.sum(sdr_cost_gradient(ms, V).conj() * D)))
        grad = max(grad, abs(an - fd) / max(1.0, abs(fd)))
    ok = jac <= 1e-6 and grad <= 1e-6
    report(12, "derivative checks", ok,
           f"Jacobian relative gap {jac:.1e}, SDR gradient relative gap {grad:.1e} (<= 1e-6)", t0)
