"""Multi-area estimation by consensus ADMM.

Each area keeps a local state over its *extended* bus set (the buses it
supervises plus any bus touched by one of its meters).  Buses that appear in
two extended sets are shared; every pair of neighboring areas keeps an
auxiliary copy of its shared states and one multiplier per side.  A round is

1. local update (regularized least squares, or an SDP for the lifted variant),
2. neighbors exchange their shared sub-vectors and average them,
3. multiplier ascent on the local-minus-auxiliary disagreement.

Areas only ever read their own data and the messages posted to them; every
message is recorded in a ledger so locality can be audited afterwards.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .exceptions import CaseError, GridStateError, SolverError
from .grid import BRANCH_KINDS, Branch, Bus, GridCase, bundled_case
from .measurements import MeasurementPlan, MeasurementSet, _as_rng
from .robust import LinearModel, linear_model, soft_threshold
from .sdp import RowSet, SDPProblem, solve_sdp
from .static import rank1_recover

log = logging.getLogger(__name__)

ANTISYMMETRY_TOL = 1e-12
DIVERGENCE_WINDOW = 50


# -- partitions ----------------------------------------------------------------

@dataclass
class AreaPartition:
    case: GridCase
    area_ids: list
    buses: list          # supervised bus indices per area
    ext: list            # extended (local state) bus indices per area, sorted
    meters: list         # owned plan-entry indices per area
    shared: dict         # (k, l), k < l -> sorted global bus indices

    @property
    def K(self) -> int:
        return len(self.area_ids)

    @property
    def owner(self) -> np.ndarray:
        out = np.empty(self.case.n_bus, dtype=int)
        for k, b in enumerate(self.buses):
            out[b] = k
        return out

    def neighbors(self, k: int) -> list:
        return sorted({l if kk == k else kk for (kk, l) in self.shared if k in (kk, l)})

    def pair(self, k: int, l: int) -> tuple:
        return (k, l) if k < l else (l, k)

    def local_positions(self, k: int, buses) -> np.ndarray:
        """Positions of global bus indices inside area ``k``'s extended set."""
        pos = np.searchsorted(self.ext[k], buses)
        assert np.array_equal(self.ext[k][pos], buses)
        return pos

    def real_selector(self, k: int, buses) -> np.ndarray:
        """Local real coordinates (``[Re; Im]`` layout) of the given buses."""
        pos = self.local_positions(k, buses)
        return np.concatenate([pos, len(self.ext[k]) + pos])

    def to_dict(self) -> dict:
        ids = self.case.bus_ids
        return {"areas": [{"id": a, "buses": [ids[i] for i in b]} for a, b in zip(self.area_ids, self.buses)]}


def _read_assignment(case: GridCase, assignment):
    if isinstance(assignment, (str, Path)):
        path = Path(assignment)
        if not path.exists():
            raise CaseError(f"partition not found: {path}")
        try:
            assignment = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CaseError(f"malformed partition JSON: {exc.msg}", f"line {exc.lineno}") from None
    if isinstance(assignment, dict) and "areas" in assignment:
        items = [(int(a["id"]), list(a["buses"])) for a in assignment["areas"]]
    elif isinstance(assignment, dict):
        items = [(int(k), list(v)) for k, v in assignment.items()]
    else:
        items = [(i + 1, list(b)) for i, b in enumerate(assignment)]
    owner = np.full(case.n_bus, -1)
    buses = []
    for k, (aid, ids) in enumerate(items):
        idx = []
        for b in ids:
            if b not in case.index:
                raise CaseError(f"unknown bus {b}", f"areas[{k}]")
            i = case.index[b]
            if owner[i] >= 0:
                raise CaseError(f"bus {b} assigned to two areas", f"areas[{k}]")
            owner[i] = k
            idx.append(i)
        buses.append(np.array(sorted(idx), dtype=int))
    missing = np.flatnonzero(owner < 0)
    if len(missing):
        raise CaseError(f"bus {case.bus_ids[missing[0]]} left unassigned")
    return [a for a, _ in items], buses, owner


def meter_owner_bus(case: GridCase, kind: str, location) -> int:
    """Bus whose area owns a meter: the metered bus, or the branch's from-end bus."""
    if kind in BRANCH_KINDS:
        return case.index[case.branches[location[0]].from_bus]
    return case.index[location]


def partition_from_supports(case: GridCase, assignment, owner_buses, supports, allow_multi: bool = False):
    """Partition whose extended sets follow from meter supports.

    ``owner_buses[i]`` decides which area owns meter ``i``; ``supports[i]``
    lists the buses the meter touches.
    """
    area_ids, buses, owner = _read_assignment(case, assignment)
    K = len(area_ids)
    ext = [set(b.tolist()) for b in buses]
    meters = [[] for _ in range(K)]
    for i, (ob, sup) in enumerate(zip(owner_buses, supports)):
        k = owner[ob]
        meters[k].append(i)
        ext[k].update(int(s) for s in sup)
    ext = [np.array(sorted(e), dtype=int) for e in ext]
    claims = np.zeros(case.n_bus, dtype=int)
    for e in ext:
        claims[e] += 1
    if not allow_multi and claims.max() > 2:
        bad = int(np.argmax(claims))
        raise CaseError(f"shared state claimed by 3+ areas: bus {case.bus_ids[bad]}")
    shared = {}
    sets = [set(e.tolist()) for e in ext]
    for k in range(K):
        for l in range(k + 1, K):
            s = sets[k] & sets[l]
            if s:
                shared[(k, l)] = np.array(sorted(s), dtype=int)
    return AreaPartition(case, area_ids, buses, ext, [np.array(m, dtype=int) for m in meters], shared)


def partition(case: GridCase, assignment, plan: MeasurementPlan | None = None, allow_multi: bool = False):
    """Partition a case; with a plan, meters are assigned and extended sets grown.

    Branch meters belong to the area supervising the branch's from-end bus.
    """
    if plan is None:
        return partition_from_supports(case, assignment, [], [], allow_multi)
    owners = [meter_owner_bus(case, e.kind, e.location) for e in plan.entries]
    supports = [e.support() for e in plan.entries]
    return partition_from_supports(case, assignment, owners, supports, allow_multi)


def validate_overlap_topology(part: AreaPartition) -> dict:
    """Area-overlap graph is a tree (``as4``); each area keeps a private bus (``as5``)."""
    K = part.K
    edges = list(part.shared)
    parent = list(range(K))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    acyclic = True
    for k, l in edges:
        rk, rl = find(k), find(l)
        if rk == rl:
            acyclic = False
        parent[rk] = rl
    connected = len({find(k) for k in range(K)}) == 1
    private = []
    for k in range(K):
        covered = set()
        for l in part.neighbors(k):
            covered.update(part.shared[part.pair(k, l)].tolist())
        private.append(bool(set(part.ext[k].tolist()) - covered))
    return {"as4_holds": bool(acyclic and connected), "as5_holds": all(private),
            "acyclic": acyclic, "connected": connected, "private_bus": private}


# -- per-area linear models ----------------------------------------------------

def _real_row_offsets(plan: MeasurementPlan) -> np.ndarray:
    width = np.where(plan.linear_mask, 2, 1)
    return np.concatenate([[0], np.cumsum(width)])


def area_models(part: AreaPartition, mset: MeasurementSet, v_lin=None) -> list:
    """Whitened per-area models over local ``[Re v_k; Im v_k]`` coordinates."""
    glob = linear_model(mset, v_lin)
    off = _real_row_offsets(mset.plan)
    N = part.case.n_bus
    out = []
    for k in range(part.K):
        rows = np.concatenate([np.arange(off[i], off[i + 1]) for i in part.meters[k]]) \
            if len(part.meters[k]) else np.zeros(0, dtype=int)
        cols = np.concatenate([part.ext[k], N + part.ext[k]])
        out.append(LinearModel(glob.H[np.ix_(rows, cols)].reshape(len(rows), len(cols)), glob.z[rows]))
    return out


def centralized_lse(part: AreaPartition, models: list) -> np.ndarray:
    """Global least squares from the stacked area models (sparse normal equations)."""
    N = part.case.n_bus
    rows, cols, vals, z = [], [], [], []
    r0 = 0
    for k, m in enumerate(models):
        gcols = np.concatenate([part.ext[k], N + part.ext[k]])
        Hc = scipy.sparse.coo_matrix(m.H)
        rows.append(Hc.row + r0)
        cols.append(gcols[Hc.col])
        vals.append(Hc.data)
        z.append(m.z)
        r0 += m.M
    H = scipy.sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(r0, 2 * N))
    z = np.concatenate(z)
    G = (H.T @ H).tocsc()
    return scipy.sparse.linalg.spsolve(G, H.T @ z)


def local_view(part: AreaPartition, k: int, x_global: np.ndarray) -> np.ndarray:
    N = part.case.n_bus
    return np.concatenate([x_global[part.ext[k]], x_global[N + part.ext[k]]])


def assemble(part: AreaPartition, x_areas: list) -> np.ndarray:
    """Global complex state from each area's supervised buses."""
    v = np.zeros(part.case.n_bus, dtype=complex)
    for k, x in enumerate(x_areas):
        n = len(part.ext[k])
        pos = part.local_positions(k, part.buses[k])
        v[part.buses[k]] = x[pos] + 1j * x[n + pos]
    return v


# -- consensus ADMM ------------------------------------------------------------

@dataclass
class ADMMOptions:
    mu: float = 1.0
    rho: float = 1.0
    max_iter: int = 200
    tol: float = 1e-8
    store_multipliers: bool = True

    def __post_init__(self):
        if not self.mu > 0 or not self.rho > 0:
            raise ValueError("ADMM penalties must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class ConsensusTrace:
    e_kc: list = field(default_factory=list)
    e_ko: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    multipliers: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.residual)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "area", "e_kc", "e_ko", "consensus_residual"])
        for i in range(self.iterations):
            for k in range(len(self.e_kc[i]) if self.e_kc else len(self.e_ko[i])):
                ekc = self.e_kc[i][k] if self.e_kc else float("nan")
                eko = self.e_ko[i][k] if self.e_ko else float("nan")
                w.writerow([i + 1, k, repr(float(ekc)), repr(float(eko)), repr(float(self.residual[i]))])
        return buf.getvalue()

    def first_below(self, series: str, level: float) -> int | None:
        """First iteration (1-based) whose area-averaged error is ``<= level``."""
        for i, e in enumerate(getattr(self, series)):
            if float(np.mean(e)) <= level:
                return i + 1
        return None


@dataclass
class ADMMResult:
    x: list
    trace: ConsensusTrace
    converged: bool
    o: list | None = None

    @property
    def iterations(self) -> int:
        return self.trace.iterations

    def states(self, part: AreaPartition) -> list:
        return [x[:len(e)] + 1j * x[len(e):] for x, e in zip(self.x, part.ext)]


class _Area:
    """Local data and state of one area; sees nothing global."""

    def __init__(self, k, model: LinearModel, selectors: dict, opts: ADMMOptions, robust_lam=None):
        self.k = k
        self.H, self.z = model.H, model.z
        self.sel = selectors
        self.mu, self.rho = opts.mu, opts.rho
        n = self.H.shape[1]
        D = np.zeros(n)
        for s in selectors.values():
            D[s] += 1.0
        self.robust = robust_lam is not None
        self.lam = robust_lam
        HtH = self.H.T @ self.H
        if self.robust:
            M = self.H.shape[0]
            K = np.block([[HtH + self.mu * np.diag(D), self.H.T],
                          [self.H, (1.0 + self.rho) * np.eye(M)]])
            self.o = np.zeros(M)
            self.omega = np.zeros(M)
            self.xi = np.zeros(M)
        else:
            K = HtH + self.mu * np.diag(D)
        try:
            self.factor = scipy.linalg.cho_factor(K)
        except np.linalg.LinAlgError:
            raise SolverError(f"area {k}: local update is singular (area unobservable without neighbors)") from None
        self.x = np.zeros(n)
        self.v = {}
        self.multiplier = {l: np.zeros(len(s)) for l, s in selectors.items()}

    def local_update(self):
        rhs = self.H.T @ self.z
        for l, s in self.sel.items():
            np.add.at(rhs, s, self.mu * self.v[l] - self.multiplier[l])
        if self.robust:
            rhs = np.concatenate([rhs, self.z - self.xi + self.rho * self.omega])
            sol = scipy.linalg.cho_solve(self.factor, rhs)
            n = len(self.x)
            self.x, self.o = sol[:n], sol[n:]
        else:
            self.x = scipy.linalg.cho_solve(self.factor, rhs)

    def outgoing(self) -> dict:
        return {l: self.x[s].copy() for l, s in self.sel.items()}

    def exchange(self, inbox: dict):
        self.inbox = inbox
        for l, s in self.sel.items():
            self.v[l] = 0.5 * (self.x[s] + inbox[l])
        if self.robust:
            self.omega = soft_threshold(self.o + self.xi / self.rho, self.lam / self.rho)

    def ascend(self):
        res = 0.0
        for l, s in self.sel.items():
            # x[s] - v equals half the disagreement with the neighbor; written this
            # way the two sides add exactly opposite increments in floating point
            d = 0.5 * (self.x[s] - self.inbox[l])
            self.multiplier[l] = self.multiplier[l] + self.mu * d
            res = max(res, float(np.linalg.norm(d)))
        if self.robust:
            self.xi = self.xi + self.rho * (self.o - self.omega)
            res = max(res, float(np.linalg.norm(self.o - self.omega)))
        return res


def _run(part: AreaPartition, models: list, opts: ADMMOptions, x_central=None, x_true=None,
         v_init=None, multipliers0=None, robust_lam=None, seed=None) -> ADMMResult:
    if len(models) != part.K:
        raise GridStateError(f"expected {part.K} area models, got {len(models)}")
    N = part.case.n_bus
    areas = []
    for k, m in enumerate(models):
        sel = {l: part.real_selector(k, part.shared[part.pair(k, l)]) for l in part.neighbors(k)}
        if m.H.shape[1] != 2 * len(part.ext[k]):
            raise GridStateError(f"area {part.area_ids[k]}: model has {m.H.shape[1]} columns, "
                                 f"expected {2 * len(part.ext[k])}")
        areas.append(_Area(k, m, sel, opts, robust_lam))
    flat = np.concatenate([np.ones(N), np.zeros(N)]) if v_init is None else \
        np.concatenate([np.real(v_init), np.imag(v_init)])
    for a in areas:
        for l in a.sel:
            a.v[l] = local_view(part, a.k, flat)[a.sel[l]]
    if multipliers0 is not None:
        rng = _as_rng(seed)
        for a in areas:
            for l in a.multiplier:
                a.multiplier[l] = multipliers0 * rng.standard_normal(len(a.multiplier[l]))
    trace = ConsensusTrace()
    views_c = None if x_central is None else [local_view(part, k, x_central) for k in range(part.K)]
    views_t = None if x_true is None else [local_view(part, k, x_true) for k in range(part.K)]
    sizes = np.array([len(e) for e in part.ext])
    converged = False
    growth = 0
    for it in range(1, opts.max_iter + 1):
        for a in areas:
            a.local_update()
        posts = {a.k: a.outgoing() for a in areas}
        inboxes = {a.k: {} for a in areas}
        for src, out in posts.items():
            for dst, payload in out.items():
                inboxes[dst][src] = payload
                trace.messages.append((it, src, dst, len(payload)))
        v_prev = [{l: a.v[l].copy() for l in a.sel} for a in areas]
        for a in areas:
            a.exchange(inboxes[a.k])
        res = max([a.ascend() for a in areas] + [0.0])
        dual = max([opts.mu * float(np.linalg.norm(a.v[l] - v_prev[a.k][l])) for a in areas for l in a.sel] + [0.0])
        if opts.store_multipliers:
            trace.multipliers.append({(a.k, l): a.multiplier[l].copy() for a in areas for l in a.sel})
        if views_c is not None:
            trace.e_kc.append(np.array([np.linalg.norm(a.x - views_c[a.k]) for a in areas]) / sizes)
        if views_t is not None:
            trace.e_ko.append(np.array([np.linalg.norm(a.x - views_t[a.k]) for a in areas]) / sizes)
        if trace.residual and res > trace.residual[-1]:
            growth += 1
        else:
            growth = 0
        trace.residual.append(res)
        if growth >= DIVERGENCE_WINDOW:
            trace.diagnostics["diverged"] = True
            log.warning("consensus residual grew for %d consecutive iterations; stopping", growth)
            break
        if res <= opts.tol and dual <= opts.tol:
            converged = True
            break
    trace.diagnostics.update({"converged": converged, "final_residual": trace.residual[-1]})
    # the soft-thresholded copy is the sparse outlier estimate
    o = [a.omega for a in areas] if robust_lam is not None else None
    return ADMMResult([a.x for a in areas], trace, converged, o)


def admm_consensus(part: AreaPartition, models: list, mu: float = 1.0, opts: ADMMOptions | None = None,
                   x_central=None, x_true=None, v_init=None, multipliers0=None, seed=None) -> ADMMResult:
    """Consensus least squares across areas.

    ``x_central`` / ``x_true`` (global ``[Re; Im]`` vectors) only feed the
    trace.  Auxiliary copies start at ``v_init`` (flat profile by default);
    multipliers start at zero unless ``multipliers0`` gives a random scale.
    """
    opts = opts or ADMMOptions(mu=mu)
    return _run(part, models, opts, x_central, x_true, v_init, multipliers0, seed=seed)


def admm_robust(part: AreaPartition, models: list, lam: float = 1.34, opts: ADMMOptions | None = None,
                x_central=None, x_true=None, v_init=None) -> ADMMResult:
    """Consensus Huber estimation: per-area outlier vectors, soft-thresholded copies."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    opts = opts or ADMMOptions()
    return _run(part, models, opts, x_central, x_true, v_init, robust_lam=lam)


def check_antisymmetry(trace: ConsensusTrace, tol: float = ANTISYMMETRY_TOL) -> dict:
    """``lambda_{k,l} = -lambda_{l,k}`` at every stored iteration."""
    worst = []
    for snap in trace.multipliers:
        w = 0.0
        for (k, l), lam in snap.items():
            if k < l:
                w = max(w, float(np.max(np.abs(lam + snap[(l, k)]), initial=0.0)))
        worst.append(w)
    peak = max(worst, default=0.0)
    return {"holds": peak <= tol, "max_violation": peak, "per_iteration": worst, "tol": tol}


def check_locality(trace: ConsensusTrace, part: AreaPartition) -> bool:
    """Every ledger message travelled between neighboring areas."""
    return all(dst in part.neighbors(src) for _, src, dst, _ in trace.messages)


# -- distributed semidefinite relaxation ---------------------------------------

def _block_rows(n: int, pos: np.ndarray):
    """Rows reading the entries of the principal block ``W[pos, pos]``.

    Diagonal entries, then real and imaginary parts of the strict upper
    triangle; the returned multiplicities turn a squared Frobenius distance
    into a weighted row sum.
    """
    pairs, mult, key = [], [], []
    for a, i in enumerate(pos):
        e = np.zeros(n, complex)
        e[i] = 1.0
        pairs.append((e, e))
        mult.append(1.0)
        key.append((a, a, "re"))
    for a, i in enumerate(pos):
        for b in range(a + 1, len(pos)):
            j = pos[b]
            ei = np.zeros(n, complex)
            ei[i] = 1.0
            ej = np.zeros(n, complex)
            ej[j] = 1.0
            pairs.append((ei, ej))
            mult.append(2.0)
            key.append((a, b, "re"))
            pairs.append((ei, -1j * ej))
            mult.append(2.0)
            key.append((a, b, "im"))
    return RowSet.from_pairs(n, pairs), np.array(mult), key


def _block_targets(T: np.ndarray, key) -> np.ndarray:
    return np.array([T[a, b].real if part == "re" else T[a, b].imag for a, b, part in key])


@dataclass
class SDRTrace:
    e_V: list = field(default_factory=list)
    e_v: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.residual)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "area", "matrix_error", "state_error", "consensus_residual"])
        for i in range(self.iterations):
            K = len(self.e_v[i]) if self.e_v else len(self.e_V[i])
            for k in range(K):
                eV = self.e_V[i][k] if self.e_V else float("nan")
                ev = self.e_v[i][k] if self.e_v else float("nan")
                w.writerow([i + 1, k, repr(float(eV)), repr(float(ev)), repr(float(self.residual[i]))])
        return buf.getvalue()


@dataclass
class DistributedSDRResult:
    V: list
    v: list
    trace: SDRTrace
    topology: dict


def _best_rotation(v_hat: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
    c = np.vdot(v_hat, v_ref)
    return v_hat * (c / abs(c) if abs(c) > 0 else 1.0)


def distributed_sdr(part: AreaPartition, mset: MeasurementSet, mu: float = 1.0, max_iter: int = 25,
                    tol: float = 1e-6, V_central=None, v_true=None, sdp_tol: float = 1e-7,
                    init: str = "local") -> DistributedSDRResult:
    """Consensus ADMM over overlapping PSD submatrices.

    Area ``k`` owns ``V_k`` over its extended buses; neighbors agree on the
    principal block indexed by their shared buses, cross terms included.
    Each local update is an SDP (measurement fit plus a Frobenius proximal
    term) solved by the dense barrier method.  State errors are reported
    after rotating each area's eigenvector onto the truth, since a lone area
    cannot fix the global phase.

    ``init="local"`` seeds the shared blocks with the average of uncoupled
    local solves; ``init="flat"`` starts them at the all-ones matrix.
    """
    if init not in ("local", "flat"):
        raise GridStateError(f"unknown init {init!r}")
    plan = mset.plan
    if plan.has_pmu:
        raise GridStateError("distributed relaxation handles SCADA entries only")
    if plan.cov is not None:
        raise GridStateError("distributed relaxation needs uncorrelated noise")
    topo = validate_overlap_topology(part)
    if not (topo["as4_holds"] and topo["as5_holds"]):
        log.info("overlap topology does not satisfy the tree/private-bus conditions; running anyway")
    K = part.K
    w_all = 1.0 / plan.sigmas ** 2
    local = []
    for k in range(K):
        ext = part.ext[k]
        n = len(ext)
        ents = [plan.entries[i].restrict(ext) for i in part.meters[k]]
        meas = RowSet.from_pairs(n, [(e.a, e.b) for e in ents])
        nbrs = part.neighbors(k)
        blocks = {}
        for l in nbrs:
            pos = part.local_positions(k, part.shared[part.pair(k, l)])
            rows, mult, key = _block_rows(n, pos)
            blocks[l] = (pos, rows, mult, key)
        local.append({"n": n, "meas": meas, "y": mset.z.real[part.meters[k]],
                      "w": w_all[part.meters[k]], "blocks": blocks})
    aux = {}
    lam = {}
    for (k, l), s in part.shared.items():
        aux[(k, l)] = np.ones((len(s), len(s)), dtype=complex)
        lam[(k, l)] = np.zeros((len(s), len(s)), dtype=complex)
        lam[(l, k)] = np.zeros((len(s), len(s)), dtype=complex)
    if init == "local":
        W0 = []
        # weak pull toward flat keeps buses without local meters bounded
        eps = 1e-3 * mu
        for k, L in enumerate(local):
            rows, ys, ws = L["meas"], [L["y"]], [L["w"]]
            for l, (pos, brows, mult, key) in L["blocks"].items():
                rows = rows.concat(brows)
                ys.append(_block_targets(aux[part.pair(k, l)], key))
                ws.append(0.5 * eps * mult)
            res = solve_sdp(SDPProblem(L["n"], rows, np.concatenate(ys), np.concatenate(ws)), rel_gap=sdp_tol)
            if not np.all(np.isfinite(res.W)):
                raise SolverError(f"area {part.area_ids[k]}: initial local SDP failed")
            W0.append(res.W)
        for (k, l) in part.shared:
            pk = local[k]["blocks"][l][0]
            pl = local[l]["blocks"][k][0]
            aux[(k, l)] = 0.5 * (W0[k][np.ix_(pk, pk)] + W0[l][np.ix_(pl, pl)])
    trace = SDRTrace()
    Vs = [None] * K
    vs = [None] * K
    for it in range(1, max_iter + 1):
        for k in range(K):
            L = local[k]
            rows = L["meas"]
            ys, ws = [L["y"]], [L["w"]]
            for l, (pos, brows, mult, key) in L["blocks"].items():
                T = aux[part.pair(k, l)] - lam[(k, l)] / mu
                rows = rows.concat(brows)
                ys.append(_block_targets(T, key))
                ws.append(0.5 * mu * mult)
            prob = SDPProblem(L["n"], rows, np.concatenate(ys), np.concatenate(ws))
            res = solve_sdp(prob, rel_gap=sdp_tol)
            if not np.all(np.isfinite(res.W)):
                raise SolverError(f"area {part.area_ids[k]}: local SDP failed", {"iteration": it})
            Vs[k] = res.W
        posts = {}
        for k in range(K):
            for l, (pos, *_rest) in local[k]["blocks"].items():
                posts[(k, l)] = Vs[k][np.ix_(pos, pos)]
                trace.messages.append((it, k, l, posts[(k, l)].size))
        res_max = 0.0
        for (k, l) in part.shared:
            aux[(k, l)] = 0.5 * (posts[(k, l)] + posts[(l, k)])
        for (k, l) in part.shared:
            for a, b in ((k, l), (l, k)):
                d = 0.5 * (posts[(a, b)] - posts[(b, a)])
                lam[(a, b)] = lam[(a, b)] + mu * d
                res_max = max(res_max, float(np.linalg.norm(d)))
        trace.residual.append(res_max)
        for k in range(K):
            vs[k] = rank1_recover(Vs[k], "eig")
        if V_central is not None:
            trace.e_V.append(np.array([np.linalg.norm(Vs[k] - V_central[np.ix_(part.ext[k], part.ext[k])])
                                       for k in range(K)]))
        if v_true is not None:
            trace.e_v.append(np.array([np.linalg.norm(_best_rotation(vs[k], v_true[part.ext[k]]) - v_true[part.ext[k]])
                                       for k in range(K)]))
        if res_max <= tol and it > 1:
            break
    trace.diagnostics["topology"] = topo
    return DistributedSDRResult(Vs, vs, trace, topo)


# -- synthetic multi-area systems ----------------------------------------------

@dataclass
class SyntheticGrid:
    case: GridCase
    partition: AreaPartition
    models: list
    x_true: np.ndarray
    sigma: float


def _pmu_rows(phi_local: np.ndarray) -> np.ndarray:
    return np.vstack([np.concatenate([phi_local.real, -phi_local.imag]),
                      np.concatenate([phi_local.imag, phi_local.real])])


def build_14x300(seed=0, sigma: float = 0.005, base_plan=None) -> SyntheticGrid:
    """4,200-bus system: a 14-bus copy per bus of the 300-bus graph.

    Each 300-bus branch becomes an inter-area line between random terminal
    buses of the two copies, keeping its electrical parameters.  Every copy
    carries the four-area PMU plan; each inter-area line gets a current
    phasor meter at its from end.  A bus serves as the to-terminal for at
    most one foreign area, so every shared state has two owners.
    """
    from importlib.resources import files
    from .grid import build_admittance, _branch_stamp
    from .measurements import load_plan

    rng = _as_rng(seed)
    small = bundled_case("ieee14")
    big = bundled_case("ieee300")
    m14 = build_admittance(small)
    plan14 = load_plan(files("gridstate") / "data" / "fig3_plan.json" if base_plan is None else base_plan, m14)
    J14 = np.vstack([_pmu_rows(e.phi) for e in plan14.entries])
    n14 = small.n_bus
    A = big.n_bus
    area_of = {b: i for i, b in enumerate(big.bus_ids)}
    buses = [Bus(n14 * a + j + 1, bus.gs, bus.bs) for a in range(A) for j, bus in enumerate(small.buses)]
    branches = []
    for a in range(A):
        for br in small.branches:
            f = n14 * a + small.index[br.from_bus] + 1
            t = n14 * a + small.index[br.to_bus] + 1
            branches.append(Branch(f, t, br.g, br.b, br.bs, br.tap_mag, br.tap_ang))
    claimed = {}
    ties = []
    for br in big.branches:
        a, b = area_of[br.from_bus], area_of[br.to_bus]
        if a == b:
            continue
        f = n14 * a + int(rng.integers(n14)) + 1
        free = [j for j in range(n14) if claimed.get((b, j), a) == a]
        j = int(free[rng.integers(len(free))])
        claimed[(b, j)] = a
        t = n14 * b + j + 1
        ties.append(len(branches))
        branches.append(Branch(f, t, br.g, br.b, br.bs, br.tap_mag, br.tap_ang))
    case = GridCase(tuple(buses), tuple(branches), 1, "ieee14x300")
    N = case.n_bus
    assignment = [[n14 * a + j + 1 for j in range(n14)] for a in range(A)]
    owners, supports = [], []
    for a in range(A):
        for e in plan14.entries:
            owners.append(n14 * a + int(e.support()[0]))
            supports.append(n14 * a + e.support())
    for bi in ties:
        br = case.branches[bi]
        owners.append(case.index[br.from_bus])
        supports.append(np.array([case.index[br.from_bus], case.index[br.to_bus]]))
    part = partition_from_supports(case, assignment, owners, supports)
    v = (1.0 + 0.05 * rng.uniform(-1, 1, N)) * np.exp(1j * 0.1 * rng.uniform(-1, 1, N))
    x_true = np.concatenate([v.real, v.imag])
    models = []
    for a in range(A):
        ext = part.ext[a]
        n = len(ext)
        pos14 = part.local_positions(a, n14 * a + np.arange(n14))
        rows = []
        H_own = np.zeros((J14.shape[0], 2 * n))
        H_own[:, pos14] = J14[:, :n14]
        H_own[:, n + pos14] = J14[:, n14:]
        rows.append(H_own)
        for bi in ties:
            br = case.branches[bi]
            fi, ti = case.index[br.from_bus], case.index[br.to_bus]
            if fi // n14 != a:
                continue
            yff, yft, _, _ = _branch_stamp(br)
            phi = np.zeros(n, complex)
            pf, pt = part.local_positions(a, np.array([fi, ti]))
            phi[pf] += yff
            phi[pt] += yft
            rows.append(_pmu_rows(phi))
        H = np.vstack(rows)
        x_loc = local_view(part, a, x_true)
        z = H @ x_loc + sigma * rng.standard_normal(H.shape[0])
        models.append(LinearModel(H / sigma, z / sigma))
    return SyntheticGrid(case, part, models, x_true, sigma)


def distance_bands(case: GridCase, K: int = 3, seed_bus: int | None = None) -> list:
    """Split buses into ``K`` bands of hop distance from a peripheral bus.

    Lines only join equal or adjacent bands, so as long as each band is at
    least two hops wide the overlaps of non-adjacent bands stay empty and the
    overlap graph is a path.
    """
    nbr = case.neighbors()
    start = case.index[seed_bus] if seed_bus is not None else 0

    def bfs(s):
        dist = np.full(case.n_bus, -1)
        dist[s] = 0
        queue = [s]
        for u in queue:
            for w in nbr[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist

    far = int(np.argmax(bfs(start)))
    dist = bfs(far)
    levels = np.unique(dist)
    counts = np.array([(dist == lv).sum() for lv in levels])
    cum = np.cumsum(counts) / case.n_bus
    cuts = [int(np.searchsorted(cum, q)) for q in np.arange(1, K) / K]
    bands = np.zeros(case.n_bus, dtype=int)
    for i, c in enumerate(cuts):
        bands[dist > levels[c]] = i + 1
    return [[case.bus_ids[i] for i in np.flatnonzero(bands == k)] for k in range(K)]
