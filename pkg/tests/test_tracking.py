import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_state
from gridstate.exceptions import GridStateError
from gridstate.experiments import steady_state_error, track_scenario
from gridstate.grid import build_admittance, bundled_case
from gridstate.measurements import align_phase, generate_plan, simulate, wls_cost
from gridstate.static import gauss_newton
from gridstate.tracking import (DynamicsModel, HoltEKF, HoltSmoother, LinearObservation, OnlineTracker, TrackerState,
                                default_step_constant, ekf_step, holt_identify, mhe_cost, mhe_solve, online_loss,
                                online_psse_step, project_psd, regret_report, transition_products)


@pytest.fixture(scope="module")
def radial6():
    case = bundled_case("radial6")
    return case, build_admittance(case)


def _v6(case):
    return align_phase(random_state(case.n_bus, np.random.default_rng(21), 0.1), case.ref_index)


def _eig_clip(X):
    lam, U = np.linalg.eigh(0.5 * (X + X.conj().T))
    return (U * np.clip(lam, 0, None)) @ U.conj().T


# -- Holt ----------------------------------------------------------------------

def test_holt_constant_history():
    v = np.array([1.0 + 0.1j, 0.95 - 0.05j])
    dyn = holt_identify([v] * 20)
    assert np.allclose(dyn.predict(v), v, atol=1e-14)
    hs = HoltSmoother()
    for _ in range(10):
        hs.update(v)
    assert np.allclose(hs.b, 0)


def test_holt_ramp_continues_exactly():
    d = np.array([1e-3 + 2e-3j, -5e-4j])
    v0 = np.array([1.0, 0.98 + 0.01j])
    hist = [v0 + t * d for t in range(300)]
    dyn = holt_identify(hist)
    assert np.allclose(dyn.predict(hist[-1]), hist[-1] + d, atol=1e-12)


def test_holt_alpha_one_beta_zero_is_identity():
    hist = np.random.default_rng(0).normal(size=(6, 3)) + 0j
    dyn = holt_identify(hist, alpha=1.0, beta=0.0)
    assert np.allclose(dyn.F, np.eye(3))
    assert np.allclose(dyn.predict(hist[-1]), hist[-1])


def test_holt_validation():
    with pytest.raises(ValueError):
        HoltSmoother(alpha=0.0)
    with pytest.raises(ValueError):
        HoltSmoother(beta=1.0)
    with pytest.raises(GridStateError):
        holt_identify([[1.0]])


def test_dynamics_validation():
    with pytest.raises(GridStateError):
        DynamicsModel(np.eye(2), np.zeros(2), -np.eye(4))
    with pytest.raises(GridStateError):
        DynamicsModel(np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(GridStateError):
        TrackerState(np.zeros(1), np.diag([1.0, -1.0]))


# -- PSD projection ------------------------------------------------------------

def test_project_psd_matches_eigen_clip():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = rng.integers(2, 9)
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        X = A + A.conj().T
        assert np.abs(project_psd(X) - _eig_clip(X)).max() <= 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6, 6), elements=st.floats(-3, 3)))
def test_project_psd_properties(a):
    A = a[0] + 1j * a[1]
    X = A + A.conj().T
    P = project_psd(X)
    assert np.linalg.eigvalsh(P).min() >= -1e-9
    assert np.allclose(project_psd(P), P, atol=1e-9)
    # Frobenius-nearest: no random PSD candidate does better
    rng = np.random.default_rng(0)
    d = np.linalg.norm(X - P)
    for _ in range(5):
        B = rng.normal(size=(6, 6))
        assert np.linalg.norm(X - B @ B.T) >= d - 1e-9


# -- Kalman filter -------------------------------------------------------------

def test_ekf_matches_scalar_kalman_filter():
    rng = np.random.default_rng(2)
    f, gr, q, r = 0.97, 0.01, 1e-3, 4e-2
    dyn = DynamicsModel([[f]], [gr + 0.02j], q * np.eye(2))
    tr = TrackerState(np.array([0.5 + 0.1j]), 0.3 * np.eye(2))
    # two independent scalar filters, one per real coordinate
    x = np.array([0.5, 0.1])
    P = np.array([0.3, 0.3])
    g = np.array([gr, 0.02])
    worst = 0.0
    for _ in range(100):
        z = rng.normal(size=2)
        ekf_step(tr, LinearObservation(np.eye(2), z, r * np.eye(2)), dyn)
        xp, Pp = f * x + g, f * f * P + q
        K = Pp / (Pp + r)
        x, P = xp + K * (z - xp), (1 - K) * Pp
        worst = max(worst, np.abs(tr.x - x).max(), np.abs(np.diag(tr.P) - P).max())
    assert worst <= 1e-10
    assert abs(tr.P[0, 1]) <= 1e-14


def test_ekf_covariance_nonincreasing_static():
    dyn = DynamicsModel(np.eye(2), np.zeros(2), np.zeros((4, 4)))
    tr = TrackerState(np.zeros(2), np.eye(4))
    H = np.array([[1.0, 0.5, 0, 0], [0, 0, 1.0, 0], [0, 1.0, 0, 1.0]])
    obs = LinearObservation(H, np.array([0.3, -0.1, 0.2]), 0.1 * np.eye(3))
    prev = tr.P.copy()
    for _ in range(30):
        ekf_step(tr, obs, dyn)
        assert np.linalg.eigvalsh(prev - tr.P).min() >= -1e-12
        prev = tr.P.copy()


def test_ekf_zero_innovation():
    dyn = DynamicsModel(np.eye(1), np.zeros(1), np.zeros((2, 2)))
    tr = TrackerState(np.array([0.4 - 0.2j]), np.eye(2))
    obs = LinearObservation(np.eye(2), np.array([0.4, -0.2]), 0.5 * np.eye(2))
    ekf_step(tr, obs, dyn)
    assert np.allclose(tr.v, [0.4 - 0.2j], atol=1e-15)
    assert np.all(np.diag(tr.P) < 1.0)


def test_ekf_covariance_psd_long_run(radial6):
    case, model = radial6
    plan = generate_plan(model, "full")
    rng = np.random.default_rng(4)
    v = _v6(case)
    ekf = HoltEKF(v, 1e-4 * np.eye(2 * case.n_bus), 1e-6 * np.eye(2 * case.n_bus))
    worst = np.inf
    for t in range(1000):
        ekf.step(simulate(plan, v, seed=rng, t=t))
        worst = min(worst, np.linalg.eigvalsh(ekf.state.P).min())
    assert worst >= -1e-12
    assert np.allclose(ekf.state.P, ekf.state.P.T)


# -- online projected gradient -----------------------------------------------------

def test_online_step_fixed_point(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all + pflow_from + qflow_from")
    v = _v6(case)
    V = np.outer(v, v.conj())
    mset = simulate(plan, v, noiseless=True)
    assert online_loss(mset, V) <= 1e-20
    assert np.allclose(online_psse_step(V, mset, 0.1), V, atol=1e-12)


def test_online_step_interior_is_plain_gradient(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all")
    mset = simulate(plan, _v6(case), noiseless=True)
    V = 2.0 * np.eye(case.n_bus)
    mu = 1e-3
    # vmag2 rows read diagonal entries: gradient 2 (V_ii - z_i) on the diagonal
    expect = V - mu * np.diag(2 * (np.diag(V).real - mset.z.real))
    assert np.allclose(online_psse_step(V, mset, mu), expect, atol=1e-14)
    with pytest.raises(ValueError):
        online_psse_step(V, mset, 0.0)


def test_regret_static_truth_exact_start(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all + pflow_from + qflow_from")
    v = _v6(case)
    tr = OnlineTracker(np.outer(v, v.conj()))
    for t in range(20):
        tr.step(simulate(plan, v, noiseless=True, t=t))
    rep = regret_report(tr)
    assert rep["tracker_loss"] <= 1e-20
    assert rep["regret"] <= 1e-6


def test_regret_single_round_definition(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all + pflow_from + qflow_from")
    v = _v6(case)
    mset = simulate(plan, v, noiseless=True)
    V0 = np.eye(case.n_bus)
    tr = OnlineTracker(V0)
    tr.step(mset)
    rep = regret_report(tr, 1)
    # the truth lifts to a feasible zero-loss action
    assert rep["best_fixed_loss"] == pytest.approx(0.0, abs=1e-6)
    assert rep["regret"] == pytest.approx(online_loss(mset, V0), rel=1e-6, abs=1e-6)
    with pytest.raises(GridStateError):
        regret_report(tr, 2)


def test_regret_per_round_decreases_alternating(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all + pflow_from + qflow_from")
    rng = np.random.default_rng(5)
    v1 = _v6(case)
    v2 = v1 * (1.02 * np.exp(0.01j * np.arange(case.n_bus)))
    mset0 = simulate(plan, v1, noiseless=True)
    tr = OnlineTracker(np.eye(case.n_bus), 2 * default_step_constant(mset0))
    for t in range(80):
        tr.step(simulate(plan, v1 if t % 2 == 0 else v2, seed=rng, t=t))
    r = [regret_report(tr, T)["regret"] / T for T in (10, 40, 80)]
    assert r[0] > r[1] > r[2]


# -- moving horizon -----------------------------------------------------------

def test_transition_products_explicit():
    rng = np.random.default_rng(6)
    Fs = [rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)) for _ in range(4)]
    gs = [rng.normal(size=3) + 1j * rng.normal(size=3) for _ in range(4)]
    Ts, cs = transition_products(Fs, gs)
    v = rng.normal(size=3) + 1j * rng.normal(size=3)
    x = v.copy()
    for s in range(4):
        x = Fs[s] @ x + gs[s]
        assert np.abs(Ts[s + 1] @ v + cs[s + 1] - x).max() <= 1e-12
    assert np.allclose(Ts[-1], Fs[3] @ Fs[2] @ Fs[1] @ Fs[0], atol=1e-12)


def test_mhe_single_snapshot_is_static_lse(model14, case14):
    plan = generate_plan(model14, "pmu_v_all + pmu_i_from")
    v = case14.operating_point()
    mset = simulate(plan, v, seed=7)
    path = mhe_solve([mset], [], np.ones(14), 0.0)
    assert len(path) == 1
    assert np.allclose(path[0], gauss_newton(mset).v_hat, atol=1e-9)


def test_mhe_heavy_prior(model14, case14):
    plan = generate_plan(model14, "full")
    v = case14.operating_point()
    window = [simulate(plan, v, seed=8 + t, t=t) for t in range(3)]
    prior = v * 1.01
    path = mhe_solve(window, [np.eye(14)] * 2, prior, 1e12)
    assert np.abs(path[0] - prior).max() <= 1e-6


def test_mhe_cost_not_above_predictor(model14, case14):
    plan = generate_plan(model14, "full")
    rng = np.random.default_rng(9)
    v = case14.operating_point()
    window = [simulate(plan, v, seed=rng, t=t) for t in range(4)]
    F = 0.999 * np.eye(14)
    prior = align_phase(v + 0.01 * random_state(14, rng, 0.1), case14.ref_index)
    lam = 1e3
    path = mhe_solve(window, [F] * 3, prior, lam)
    Ts, cs = transition_products([F] * 3)
    assert mhe_cost(window, Ts, cs, path[0], prior, lam) <= mhe_cost(window, Ts, cs, prior, prior, lam)
    assert np.allclose(path[1], F @ path[0])


def test_mhe_sdr_mode_noiseless(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all + pflow_from + qflow_from")
    v = _v6(case)
    window = [simulate(plan, v, noiseless=True, t=t) for t in range(3)]
    path = mhe_solve(window, [np.eye(case.n_bus)] * 2, v * 1.02, 1e-6, mode="sdr")
    assert np.abs(align_phase(path[0], case.ref_index) - v).max() <= 1e-4
    with pytest.raises(ValueError):
        mhe_solve(window, [np.eye(case.n_bus)] * 2, v, 1.0, mode="bogus")
    with pytest.raises(GridStateError):
        mhe_solve(window, [np.eye(case.n_bus)], v, 1.0)


def test_mhe_not_worse_than_ekf_on_slow_ramp():
    tight = {k: 1e-6 for k in ("vmag2", "p_inj", "q_inj", "p_flow", "q_flow")}
    sc = {"case": "ieee14", "plan": "full", "sigma": tight, "steps": 80,
          "trajectory": {"kind": "ramp", "vm_rate": 2e-5, "va_rate": 1e-4}}
    out = track_scenario(sc, trackers=("ekf", "mhe"), seed=0)
    assert steady_state_error(out["rows"], "mhe", 30) <= steady_state_error(out["rows"], "ekf", 30)


def test_track_scenario_unknown_tracker():
    with pytest.raises(GridStateError):
        track_scenario("ramp_ieee14.json", trackers=("kalman",))


def test_online_loss_matches_wls_for_unit_sigma(radial6):
    case, model = radial6
    plan = generate_plan(model, "vmag2_all", {"vmag2": 1.0})
    v = _v6(case)
    mset = simulate(plan, v, seed=1)
    assert online_loss(mset, np.outer(v, v.conj())) == pytest.approx(wls_cost(mset, v), rel=1e-12)
