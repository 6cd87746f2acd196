import numpy as np
import pytest

from gridstate import distributed as dist
from gridstate.exceptions import CaseError
from gridstate.experiments import consensus_14, fig3_system
from gridstate.grid import build_admittance, bundled_case, load_case
from gridstate.measurements import generate_plan, simulate
from gridstate.robust import LinearModel, huber_solve, lse
from gridstate.static import sdr_solve


@pytest.fixture(scope="module")
def fig3():
    return fig3_system(0)


@pytest.fixture(scope="module")
def run14():
    return consensus_14(0)


def ring_case(n=6):
    doc = {"buses": [{"id": i + 1} for i in range(n)],
           "branches": [{"from": i + 1, "to": (i + 1) % n + 1, "g": 1.0, "b": -5.0} for i in range(n)],
           "ref_bus": 1}
    return load_case(doc)


# -- partitions ---------------------------------------------------------------------

def test_single_area_has_no_shared(case14):
    part = dist.partition(case14, [case14.bus_ids], generate_plan(build_admittance(case14), "full"))
    assert part.K == 1 and part.shared == {}


def test_fig3_extension(fig3):
    part, _, _ = fig3
    ids = part.case.bus_ids
    area4 = [ids[i] for i in part.ext[3]]
    assert 11 in area4 and 11 not in [ids[i] for i in part.buses[3]]
    for (k, l), s in part.shared.items():
        # both sides index the same global buses
        assert np.array_equal(part.ext[k][part.local_positions(k, s)], part.ext[l][part.local_positions(l, s)])


def test_partition_errors(case14):
    with pytest.raises(CaseError, match="left unassigned"):
        dist.partition(case14, [case14.bus_ids[:-1]])
    with pytest.raises(CaseError, match="two areas"):
        dist.partition(case14, [case14.bus_ids, [1]])
    with pytest.raises(CaseError, match="unknown bus"):
        dist.partition(case14, [case14.bus_ids + [99]])
    with pytest.raises(CaseError, match="partition not found"):
        dist.partition(case14, "/nonexistent.json")


def test_three_way_claim_rejected():
    case = ring_case(3)
    with pytest.raises(CaseError, match="3\\+ areas"):
        dist.partition_from_supports(case, [[1], [2], [3]], [0, 2, 1],
                                     [np.array([0, 1]), np.array([1, 2]), np.array([1])])


def test_partition_json_round_trip(fig3):
    part, _, _ = fig3
    again = dist.partition(part.case, part.to_dict())
    assert all(np.array_equal(a, b) for a, b in zip(again.buses, part.buses))


def test_overlap_topology_examples(fig3):
    rep = dist.validate_overlap_topology(fig3[0])
    assert rep["as4_holds"] and rep["as5_holds"]
    case = ring_case(6)
    # three areas sharing pairwise around a ring: a 3-cycle in the overlap graph
    supports = [np.array([1, 2]), np.array([3, 4]), np.array([5, 0])]
    ring = dist.partition_from_supports(case, [[1, 2], [3, 4], [5, 6]], [1, 3, 5], supports)
    assert not dist.validate_overlap_topology(ring)["as4_holds"]
    # area 2 = {3, 4} is covered by its neighbors' overlaps
    covered = dist.partition_from_supports(case, [[1, 2], [3, 4], [5, 6]], [1, 4],
                                           [np.array([1, 2]), np.array([4, 3])])
    rep = dist.validate_overlap_topology(covered)
    assert not rep["as5_holds"] and rep["private_bus"][1] is False


# -- consensus ADMM -----------------------------------------------------------------

def test_single_area_admm_is_lse(case14):
    plan = generate_plan(build_admittance(case14), "pmu_v_all + pmu_i_from")
    v = case14.operating_point()
    part = dist.partition(case14, [case14.bus_ids], plan)
    models = dist.area_models(part, simulate(plan, v, seed=0))
    res = dist.admm_consensus(part, models, mu=1.0)
    assert res.iterations == 1 and res.converged
    assert np.allclose(res.x[0], lse(models[0]), atol=1e-10)


def test_centralized_lse_matches_dense(fig3):
    part, models, _ = fig3
    x = dist.centralized_lse(part, models)
    N = part.case.n_bus
    rows = []
    for k, m in enumerate(models):
        H = np.zeros((m.M, 2 * N))
        H[:, np.concatenate([part.ext[k], N + part.ext[k]])] = m.H
        rows.append(H)
    H = np.vstack(rows)
    z = np.concatenate([m.z for m in models])
    assert np.allclose(x, np.linalg.lstsq(H, z, rcond=None)[0], atol=1e-10)


def test_fig3_consensus(run14):
    s = run14.summary["admm"]
    assert s["iterations_to_central_level"] is not None
    first = next(i for i, e in enumerate(run14.plain.trace.e_kc) if np.max(e) <= 1e-4)
    assert first < 200
    assert s["antisymmetry_holds"] and s["locality_holds"]
    assert len(run14.plain.trace.e_kc) == run14.plain.iterations == len(run14.plain.trace.residual)


def test_antisymmetry_every_iteration(run14):
    rep = dist.check_antisymmetry(run14.plain.trace)
    assert rep["per_iteration"] and max(rep["per_iteration"]) <= 1e-12


def test_shared_states_agree_at_convergence(run14):
    part = run14.partition
    x = run14.plain.x
    assert run14.plain.trace.residual[-1] <= 1e-8
    for (k, l), s in part.shared.items():
        a = x[k][part.real_selector(k, s)]
        b = x[l][part.real_selector(l, s)]
        assert np.max(np.abs(a - b)) <= 1e-6


def test_perturbed_multipliers_reported(fig3):
    part, models, _ = fig3
    res = dist.admm_consensus(part, models, opts=dist.ADMMOptions(mu=1e4, max_iter=5), multipliers0=1.0, seed=0)
    assert not dist.check_antisymmetry(res.trace)["holds"]


def test_message_ledger_locality(run14):
    part = run14.partition
    assert dist.check_locality(run14.plain.trace, part)
    bad = dist.ConsensusTrace(messages=[(1, 1, 3, 4)])  # areas 2 and 4 share nothing
    assert not dist.check_locality(bad, part)


def test_trace_csv_columns(run14):
    text = run14.plain.trace.to_csv()
    assert text.splitlines()[0] == "iter,area,e_kc,e_ko,consensus_residual"
    assert len(text.splitlines()) == 1 + 4 * run14.plain.iterations


def test_options_validation():
    with pytest.raises(ValueError):
        dist.ADMMOptions(mu=0)


# -- robust consensus --------------------------------------------------------------

def test_robust_large_lambda_matches_plain(fig3):
    part, models, _ = fig3
    opts = dist.ADMMOptions(mu=1e4, max_iter=300, tol=1e-10)
    plain = dist.admm_consensus(part, models, opts=opts)
    rob = dist.admm_robust(part, models, lam=1e9, opts=opts)
    assert all(np.allclose(a, b, atol=1e-6) for a, b in zip(plain.x, rob.x))
    assert all(np.all(o == 0) for o in rob.o)


def test_robust_single_area_matches_huber(case14):
    plan = generate_plan(build_admittance(case14), "pmu_v_all + pmu_i_from")
    part = dist.partition(case14, [case14.bus_ids], plan)
    ms = simulate(plan, case14.operating_point(), seed=2)
    z = ms.z.copy()
    z[3] += 0.1
    from gridstate.measurements import MeasurementSet
    models = dist.area_models(part, MeasurementSet(plan, z))
    res = dist.admm_robust(part, models, lam=1.34, opts=dist.ADMMOptions(mu=1.0, max_iter=3000, tol=1e-12))
    v, o = huber_solve(models[0], lam=1.34, tol=1e-14)
    assert np.allclose(res.x[0], v, atol=1e-6)


def test_robust_localizes_tie_line_corruption():
    part, models, x_true = fig3_system(1)
    plan_idx = None
    from gridstate.experiments import _fig3_plan, _entry_index
    plan = _fig3_plan(None)
    plan_idx = _entry_index(plan, "pmu_i", (10, 11))
    k = 3
    pos = int(np.flatnonzero(part.meters[k] == plan_idx)[0])
    off = np.concatenate([[0], np.cumsum(np.where(plan.linear_mask[part.meters[k]], 2, 1))])
    rows = np.arange(off[pos], off[pos + 1])
    bad = [LinearModel(m.H, m.z.copy()) for m in models]
    bad[k].z[rows] += 40.0
    res = dist.admm_robust(part, bad, lam=1.34, opts=dist.ADMMOptions(mu=1e4, max_iter=2000, tol=1e-9))
    for (a, b), s in part.shared.items():
        assert np.max(np.abs(res.x[a][part.real_selector(a, s)] - res.x[b][part.real_selector(b, s)])) <= 1e-4
    o = res.o[k]
    assert set(np.argsort(-np.abs(o))[:2]) == set(rows)
    assert all(np.max(np.abs(res.o[j])) < np.min(np.abs(o[rows])) for j in range(part.K) if j != k)


# -- synthetic 4,200-bus system -----------------------------------------------------

def test_build_14x300_structure():
    g = dist.build_14x300(0)
    assert g.case.n_bus == 4200 and g.partition.K == 300
    rep = dist.validate_overlap_topology(g.partition)
    assert rep["connected"]
    claims = np.zeros(4200, int)
    for e in g.partition.ext:
        claims[e] += 1
    assert claims.max() <= 2
    again = dist.build_14x300(0)
    assert np.array_equal(g.x_true, again.x_true)


# -- distributed relaxation ------------------------------------------------------

@pytest.fixture(scope="module")
def sdr14():
    case = bundled_case("ieee14")
    plan = generate_plan(build_admittance(case), "vmag2_all + pflow_both_ends + qflow_both_ends")
    v = case.operating_point()
    ms = simulate(plan, v, seed=1)
    return case, plan, v, ms, sdr_solve(ms)


def test_distributed_sdr_single_area(sdr14):
    case, plan, v, ms, central = sdr14
    part = dist.partition(case, [case.bus_ids], plan)
    res = dist.distributed_sdr(part, ms, mu=1e3, max_iter=3, V_central=central.V_hat, v_true=v)
    assert np.max(np.abs(res.V[0] - central.V_hat)) <= 1e-6


def test_distributed_sdr_three_bands(sdr14):
    case, plan, v, ms, central = sdr14
    part = dist.partition(case, dist.distance_bands(case, 3), plan)
    res = dist.distributed_sdr(part, ms, mu=1e3, max_iter=30, V_central=central.V_hat, v_true=v)
    assert res.topology["as4_holds"]
    r = np.array(res.trace.residual)
    avg = np.convolve(r, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(avg) <= 0)
    assert r[-1] < 0.05 * r[0]
    assert res.trace.to_csv().splitlines()[0] == "iter,area,matrix_error,state_error,consensus_residual"


def test_distributed_sdr_bad_init(sdr14):
    case, plan, v, ms, _ = sdr14
    part = dist.partition(case, [case.bus_ids], plan)
    with pytest.raises(Exception, match="init"):
        dist.distributed_sdr(part, ms, init="random")


def test_distance_bands_form_a_path():
    case = bundled_case("ieee118")
    bands = dist.distance_bands(case, 3)
    assert sorted(sum(bands, [])) == sorted(case.bus_ids)
    plan = generate_plan(build_admittance(case), "vmag2_all + pflow_both_ends + qflow_both_ends")
    part = dist.partition(case, bands, plan)
    rep = dist.validate_overlap_topology(part)
    assert rep["as4_holds"] and rep["as5_holds"]
    assert set(part.shared) == {(0, 1), (1, 2)}
