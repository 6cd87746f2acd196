import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_state, two_bus_doc
from gridstate.exceptions import CaseError
from gridstate.grid import (build_admittance, build_ybus, build_yf, bundled_case, case_to_dict,
                            laplacian_h0, load_case, measurement_matrix, polar_injections, realify,
                            realify_map, QUADRATIC_KINDS)


def ring_doc(n, rng, shunts=False):
    branches = []
    for i in range(n):
        g, b = rng.uniform(0.5, 3), -rng.uniform(2, 12)
        rec = {"from": i + 1, "to": (i + 1) % n + 1, "g": g, "b": b}
        if shunts:
            rec["bs"] = rng.uniform(0, 0.1)
        branches.append(rec)
    return {"buses": [{"id": i + 1} for i in range(n)], "branches": branches, "ref_bus": 1}


# -- loading -----------------------------------------------------------------

def test_two_bus_case_loads(two_bus):
    assert two_bus.n_bus == 2 and two_bus.n_branch == 1
    assert two_bus.ref_index == 0


def test_ieee14_shape(case14):
    assert case14.n_bus == 14 and case14.n_branch == 20


@pytest.mark.parametrize("name,nb", [("ieee30", 30), ("ieee118", 118), ("ieee300", 300), ("radial6", 6)])
def test_bundled_cases_load(name, nb):
    assert bundled_case(name).n_bus == nb


def test_unknown_bus_reported_with_location():
    doc = two_bus_doc()
    doc["branches"][0]["to"] = 99
    with pytest.raises(CaseError, match="unknown bus") as exc:
        load_case(doc)
    assert exc.value.location == "branches[0].to"


def test_disconnected_rejected():
    doc = {"buses": [{"id": 1}, {"id": 2}], "branches": [], "ref_bus": 1}
    with pytest.raises(CaseError, match="disconnected"):
        load_case(doc)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d["branches"][0].update({"to": 1}), "self-loop"),
    (lambda d: d["branches"][0].update({"tap_mag": 0.0}), "positive magnitude"),
    (lambda d: d.update({"ref_bus": 7}), "unknown bus"),
    (lambda d: d["buses"].append({"id": 1}), "duplicate"),
    (lambda d: d["branches"][0].pop("g"), "missing field 'g'"),
    (lambda d: d.pop("branches"), "missing field"),
])
def test_schema_violations(mutate, msg):
    doc = two_bus_doc()
    mutate(doc)
    with pytest.raises(CaseError, match=msg):
        load_case(doc)


def test_missing_file():
    with pytest.raises(CaseError, match="case not found"):
        load_case("/nonexistent/case.json")


def test_malformed_json():
    with pytest.raises(CaseError, match="malformed"):
        load_case('{"buses": [')


def test_case_round_trip(case14):
    again = load_case(json.dumps(case_to_dict(case14)))
    assert again == case14
    assert np.array_equal(build_ybus(again), build_ybus(case14))


# -- admittances -------------------------------------------------------------

def test_ybus_two_bus_hand_value(two_bus):
    y = 1 - 2j
    assert np.allclose(build_ybus(two_bus), [[y, -y], [-y, y]])


def test_ybus_line_charging():
    Y0 = build_ybus(load_case(two_bus_doc()))
    Y1 = build_ybus(load_case(two_bus_doc(bs=0.2)))
    assert np.allclose(Y1 - Y0, np.diag([0.1j, 0.1j]))


def test_yf_from_row(two_bus):
    Yf = build_yf(two_bus)
    assert np.allclose(Yf[0], [1 - 2j, -1 + 2j])
    assert np.allclose(Yf @ np.ones(2), 0)
    assert np.all(np.count_nonzero(Yf, axis=1) == 2)


def test_transformer_stamp():
    rho = 1.05
    case = load_case(two_bus_doc(tap_mag=rho))
    y = 1 - 2j
    Y = build_ybus(case)
    assert np.allclose(Y, [[y / rho ** 2, -y / rho], [-y / rho, y]])
    Yf = build_yf(case)
    # the to-end current uses the ratio once
    assert np.allclose(Yf[1], [-y / rho, y])


def test_phase_shifter_stamp():
    case = load_case(two_bus_doc(tap_mag=1.0, tap_ang_rad=0.1))
    rho = np.exp(0.1j)
    Y = build_ybus(case)
    y = 1 - 2j
    assert np.isclose(Y[0, 1], -y / np.conj(rho)) and np.isclose(Y[1, 0], -y / rho)


def test_branch_currents_match_nodal_sum(case14, rng):
    m = build_admittance(case14)
    v = random_state(14, rng)
    inj = m.Y @ v
    # each bus injection is the sum of currents leaving it plus the bus shunt
    acc = np.array([complex(b.gs, b.bs) for b in case14.buses]) * v
    for i, br in enumerate(case14.branches):
        If, It = m.Yf[2 * i] @ v, m.Yf[2 * i + 1] @ v
        acc[case14.index[br.from_bus]] += If
        acc[case14.index[br.to_bus]] += It
    assert np.allclose(acc, inj, atol=1e-12)


def test_y_symmetric_without_transformers(rng):
    case = load_case(ring_doc(7, rng, shunts=True))
    Y = build_ybus(case)
    assert np.allclose(Y, Y.T)


def test_y_row_sums_vanish_without_shunts(rng):
    Y = build_ybus(load_case(ring_doc(7, rng)))
    assert np.allclose(Y @ np.ones(7), 0, atol=1e-12)


# -- measurement matrices ----------------------------------------------------

def test_vmag2_matrix(case14, model14):
    H = measurement_matrix(model14, "vmag2", 3).matrix
    E = np.zeros((14, 14))
    E[case14.index[3], case14.index[3]] = 1
    assert np.array_equal(H, E)


def test_injection_matrices_closed_form(model14, case14):
    Y = model14.Y
    for bus in (1, 5, 14):
        i = case14.index[bus]
        E = np.zeros((14, 14))
        E[i, i] = 1
        HP = 0.5 * (E @ Y + Y.conj().T @ E)
        # sign chosen so that v^H H v is the physical Im(v_n conj(i_n))
        HQ = (Y.conj().T @ E - E @ Y) / 2j
        assert np.allclose(measurement_matrix(model14, "p_inj", bus).matrix, HP)
        assert np.allclose(measurement_matrix(model14, "q_inj", bus).matrix, HQ)


def test_two_bus_polar_oracle():
    case = load_case(two_bus_doc())
    m = build_admittance(case)
    v = np.array([1.0, 0.95 * np.exp(-0.1j)])
    V, th = np.abs(v), np.angle(v)
    g, b = 1.0, -2.0
    d = th[0] - th[1]
    P1 = g * V[0] ** 2 - V[0] * V[1] * (g * np.cos(d) + b * np.sin(d))
    Q1 = -b * V[0] ** 2 - V[0] * V[1] * (g * np.sin(d) - b * np.cos(d))
    assert np.isclose(measurement_matrix(m, "p_inj", 1).quad(v), P1, atol=1e-12)
    assert np.isclose(measurement_matrix(m, "p_flow", (0, "from")).quad(v), P1, atol=1e-12)
    assert np.isclose(measurement_matrix(m, "q_inj", 1).quad(v), Q1, atol=1e-12)
    assert np.isclose(measurement_matrix(m, "q_flow", (0, "from")).quad(v), Q1, atol=1e-12)


def test_flat_lossless_two_bus_zero_flows():
    m = build_admittance(load_case(two_bus_doc()))
    v = np.ones(2, dtype=complex)
    for kind in ("p_inj", "q_inj"):
        assert abs(measurement_matrix(m, kind, 2).quad(v)) < 1e-15
    for kind in ("p_flow", "q_flow"):
        assert abs(measurement_matrix(m, kind, (0, "to")).quad(v)) < 1e-15
    assert measurement_matrix(m, "vmag2", 2).quad(v) == 1.0


def test_pmu_identity_row(model14, rng):
    v = random_state(14, rng)
    e = measurement_matrix(model14, "pmu_v", 4)
    assert e.is_linear and e.phi @ v == v[3]


def test_polar_and_quadratic_injections_agree(case14, model14, rng):
    for _ in range(5):
        v = random_state(14, rng, 0.3)
        P, Q = polar_injections(model14.Y, v)
        for bus in case14.bus_ids:
            i = case14.index[bus]
            assert abs(measurement_matrix(model14, "p_inj", bus).quad(v) - P[i]) < 1e-10
            assert abs(measurement_matrix(model14, "q_inj", bus).quad(v) - Q[i]) < 1e-10


def test_total_injection_is_losses(case14, model14, rng):
    v = random_state(14, rng, 0.3)
    total = sum(measurement_matrix(model14, "p_inj", b).quad(v) for b in case14.bus_ids)
    assert np.isclose(total, np.real(v.conj() @ model14.Y.conj().T @ v), atol=1e-12)


def test_invalid_locations(model14):
    with pytest.raises(CaseError, match="invalid location"):
        measurement_matrix(model14, "p_inj", 99)
    with pytest.raises(CaseError, match="invalid location"):
        measurement_matrix(model14, "p_flow", (20, "from"))
    with pytest.raises(CaseError, match="unknown measurement kind"):
        measurement_matrix(model14, "watts", 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), kind=st.sampled_from(QUADRATIC_KINDS))
def test_quadratic_forms_hermitian_and_real(case14, model14, seed, kind):
    rng = np.random.default_rng(seed)
    loc = int(rng.choice(case14.bus_ids)) if kind in ("p_inj", "q_inj", "vmag2") else \
        (int(rng.integers(case14.n_branch)), str(rng.choice(["from", "to"])))
    e = measurement_matrix(model14, kind, loc)
    H = e.matrix
    assert np.max(np.abs(H - H.conj().T)) <= 1e-12
    v = rng.standard_normal(14) + 1j * rng.standard_normal(14)
    val = v.conj() @ H @ v
    assert abs(val.imag) <= 1e-12 * max(1.0, abs(val))
    V = np.outer(v, v.conj())
    assert abs(np.trace(H @ V).real - e.quad(v)) <= 1e-12 * max(1.0, abs(val))
    assert np.allclose(e.times(v), H @ v)


# -- realification and the Laplacian -----------------------------------------

def test_realify_identity():
    assert np.array_equal(realify(np.eye(3, dtype=complex)), np.eye(6))


def test_realify_vmag2(two_bus):
    H = measurement_matrix(build_admittance(two_bus), "vmag2", 1).matrix
    R = realify(H)
    expect = np.zeros((4, 4))
    expect[0, 0] = expect[2, 2] = 1
    assert np.array_equal(R, expect)


def test_realify_rejects_non_hermitian():
    with pytest.raises(ValueError, match="not Hermitian"):
        realify(np.array([[0, 1], [0, 0]], dtype=complex))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 8))
def test_realify_quadratic_identity(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    H = A + A.conj().T
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    vb = np.concatenate([v.real, v.imag])
    R = realify(H)
    assert np.array_equal(R, R.T)
    assert abs(vb @ R @ vb - np.real(v.conj() @ H @ v)) <= 1e-12 * max(1.0, np.abs(H).sum() * np.abs(v).max() ** 2)


def test_realify_map_composes(rng):
    A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    x = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    y = A @ x
    assert np.allclose(realify_map(A) @ np.concatenate([x.real, x.imag]), np.concatenate([y.real, y.imag]))


def test_laplacian_two_bus(two_bus):
    assert np.allclose(laplacian_h0(two_bus), [[2, -2], [-2, 2]])


def test_laplacian_14(case14):
    H0 = laplacian_h0(case14)
    assert np.allclose(H0 @ np.ones(14), 0)
    eig = np.linalg.eigvalsh(H0)
    assert abs(eig[0]) <= 1e-9 and eig[1] > 1e-6
