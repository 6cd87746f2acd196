"""Network description, admittance matrices and quadratic measurement maps.

Every SCADA quantity (injections, flows, squared magnitudes) is a quadratic
form ``v^H H v`` in the complex bus-voltage vector ``v``.  The measurement
matrices built here are all of rank at most two and are stored in the dyadic
form ``H = (a b^H + b a^H) / 2``; the dense matrix is produced on demand.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import CaseError

QUADRATIC_KINDS = ("p_inj", "q_inj", "vmag2", "p_flow", "q_flow")
LINEAR_KINDS = ("pmu_v", "pmu_i")
ALL_KINDS = QUADRATIC_KINDS + LINEAR_KINDS
BUS_KINDS = ("p_inj", "q_inj", "vmag2", "pmu_v")
BRANCH_KINDS = ("p_flow", "q_flow", "pmu_i")

HERMITIAN_TOL = 1e-10


@dataclass(frozen=True)
class Bus:
    id: int
    gs: float = 0.0
    bs: float = 0.0
    vm: float | None = None
    va: float | None = None


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    bs: float = 0.0
    tap_mag: float = 1.0
    tap_ang: float = 0.0

    @property
    def y(self) -> complex:
        return complex(self.g, self.b)

    @property
    def rho(self) -> complex:
        return self.tap_mag * np.exp(1j * self.tap_ang)


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    ref_bus: int
    name: str = ""
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {b.id: i for i, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def ref_index(self) -> int:
        return self.index[self.ref_bus]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def operating_point(self) -> np.ndarray | None:
        """Recorded voltage profile, if every bus carries one."""
        if any(b.vm is None or b.va is None for b in self.buses):
            return None
        return np.array([b.vm * np.exp(1j * b.va) for b in self.buses])

    def find_branch(self, n: int, k: int) -> int:
        """Index of the first branch joining buses ``n`` and ``k`` (either orientation)."""
        for i, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {n, k}:
                return i
        raise CaseError(f"no branch between buses {n} and {k}")

    def neighbors(self) -> list[set[int]]:
        adj = [set() for _ in self.buses]
        for br in self.branches:
            f, t = self.index[br.from_bus], self.index[br.to_bus]
            adj[f].add(t)
            adj[t].add(f)
        return adj


def _validate(case: GridCase) -> None:
    if case.n_bus == 0:
        raise CaseError("case has no buses", "buses")
    if len(case.index) != case.n_bus:
        raise CaseError("duplicate bus id", "buses")
    if case.ref_bus not in case.index:
        raise CaseError(f"unknown bus {case.ref_bus}", "ref_bus")
    for i, br in enumerate(case.branches):
        for end, bus in (("from", br.from_bus), ("to", br.to_bus)):
            if bus not in case.index:
                raise CaseError(f"unknown bus {bus}", f"branches[{i}].{end}")
        if br.from_bus == br.to_bus:
            raise CaseError("self-loop branch", f"branches[{i}]")
        if not br.tap_mag > 0:
            raise CaseError("transformer ratio must have positive magnitude", f"branches[{i}].tap_mag")
    adj = case.neighbors()
    seen = {0}
    queue = deque([0])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != case.n_bus:
        missing = [case.buses[i].id for i in range(case.n_bus) if i not in seen]
        raise CaseError(f"network is disconnected; unreachable buses {missing[:10]}", "branches")


def _require(rec: dict, key: str, where: str, kind=float):
    if key not in rec:
        raise CaseError(f"missing field '{key}'", where)
    try:
        return kind(rec[key])
    except (TypeError, ValueError):
        raise CaseError(f"field '{key}' must be {kind.__name__}", where) from None


def load_case(document) -> GridCase:
    """Parse and validate a JSON case (text, mapping, or path)."""
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        path = Path(document)
        if not path.exists():
            raise CaseError(f"case not found: {path}")
        document = path.read_text()
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise CaseError(f"malformed JSON: {exc.msg}", f"line {exc.lineno}") from None
    if not isinstance(document, dict):
        raise CaseError("case document must be a JSON object")
    for key in ("buses", "branches", "ref_bus"):
        if key not in document:
            raise CaseError(f"missing field '{key}'", "<root>")

    buses = []
    for i, rec in enumerate(document["buses"]):
        where = f"buses[{i}]"
        if not isinstance(rec, dict):
            raise CaseError("bus record must be an object", where)
        buses.append(Bus(
            id=_require(rec, "id", where, int),
            gs=float(rec.get("gs", 0.0)),
            bs=float(rec.get("bs", 0.0)),
            vm=float(rec["vm"]) if "vm" in rec else None,
            va=float(rec["va_rad"]) if "va_rad" in rec else None,
        ))
    branches = []
    for i, rec in enumerate(document["branches"]):
        where = f"branches[{i}]"
        if not isinstance(rec, dict):
            raise CaseError("branch record must be an object", where)
        branches.append(Branch(
            from_bus=_require(rec, "from", where, int),
            to_bus=_require(rec, "to", where, int),
            g=_require(rec, "g", where),
            b=_require(rec, "b", where),
            bs=float(rec.get("bs", 0.0)),
            tap_mag=float(rec.get("tap_mag", 1.0)),
            tap_ang=float(rec.get("tap_ang_rad", 0.0)),
        ))
    case = GridCase(tuple(buses), tuple(branches), int(document["ref_bus"]), str(document.get("name", "")))
    _validate(case)
    return case


def case_to_dict(case: GridCase) -> dict:
    buses = []
    for b in case.buses:
        rec = {"id": b.id}
        if b.gs or b.bs:
            rec.update(gs=b.gs, bs=b.bs)
        if b.vm is not None:
            rec.update(vm=b.vm, va_rad=b.va)
        buses.append(rec)
    branches = [
        {"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b, "bs": br.bs,
         "tap_mag": br.tap_mag, "tap_ang_rad": br.tap_ang}
        for br in case.branches
    ]
    return {"name": case.name, "ref_bus": case.ref_bus, "buses": buses, "branches": branches}


def bundled_case(name: str) -> GridCase:
    """Load one of the shipped cases (``ieee14``, ``ieee30``, ``ieee118``, ``ieee300``, ``radial6``)."""
    return load_case(Path(__file__).parent / "data" / f"{name}.json")


@dataclass(frozen=True)
class AdmittanceModel:
    case: GridCase
    Y: np.ndarray
    Yf: np.ndarray

    def row(self, branch: int, end: str) -> int:
        """Row of ``Yf`` holding the current leaving ``end`` of ``branch``."""
        if end not in ("from", "to"):
            raise CaseError(f"branch end must be 'from' or 'to', got {end!r}")
        return 2 * branch + (end == "to")

    @property
    def n_bus(self) -> int:
        return self.Y.shape[0]


def _branch_stamp(br: Branch):
    """Two-port admittances (yff, yft, ytf, ytt) of the pi model with the tap at the from end."""
    y, rho = br.y, br.rho
    ysh = y + 0.5j * br.bs
    return ysh / abs(rho) ** 2, -y / np.conj(rho), -y / rho, ysh


def build_ybus(case: GridCase) -> np.ndarray:
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = case.index[br.from_bus], case.index[br.to_bus]
        yff, yft, ytf, ytt = _branch_stamp(br)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for i, bus in enumerate(case.buses):
        Y[i, i] += complex(bus.gs, bus.bs)
    return Y


def build_yf(case: GridCase) -> np.ndarray:
    Yf = np.zeros((2 * case.n_branch, case.n_bus), dtype=complex)
    for i, br in enumerate(case.branches):
        f, t = case.index[br.from_bus], case.index[br.to_bus]
        yff, yft, ytf, ytt = _branch_stamp(br)
        Yf[2 * i, f], Yf[2 * i, t] = yff, yft
        Yf[2 * i + 1, t], Yf[2 * i + 1, f] = ytt, ytf
    return Yf


def build_admittance(case: GridCase) -> AdmittanceModel:
    return AdmittanceModel(case, build_ybus(case), build_yf(case))


@dataclass(frozen=True)
class HermitianMeasurementMatrix:
    """One measurement map.

    Quadratic kinds keep ``H = (A B^H + B A^H)/2`` where ``A`` and ``B`` are
    ``N x r`` (``r = 1`` for a single meter, larger after mixing entries);
    linear (PMU) kinds keep the complex row ``phi`` so that the reading is
    ``phi @ v``.
    """

    kind: str
    location: object
    sigma: float
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    phi: np.ndarray | None = None

    def __post_init__(self):
        if self.a is not None:
            a = np.asarray(self.a, dtype=complex)
            b = np.asarray(self.b, dtype=complex)
            object.__setattr__(self, "a", a.reshape(len(a), -1))
            object.__setattr__(self, "b", b.reshape(len(b), -1))
        if self.phi is not None:
            object.__setattr__(self, "phi", np.asarray(self.phi, dtype=complex))

    @property
    def is_linear(self) -> bool:
        return self.phi is not None

    @property
    def n(self) -> int:
        return len(self.phi if self.is_linear else self.a)

    @property
    def matrix(self) -> np.ndarray:
        if self.is_linear:
            return self.phi[None, :]
        AB = self.a @ self.b.conj().T
        return 0.5 * (AB + AB.conj().T)

    def quad(self, v: np.ndarray) -> float:
        return float(np.real(np.vdot(self.a.conj().T @ v, self.b.conj().T @ v)))

    def times(self, v: np.ndarray) -> np.ndarray:
        """``H v`` without forming ``H``."""
        return 0.5 * (self.a @ (self.b.conj().T @ v) + self.b @ (self.a.conj().T @ v))

    def scaled(self, factor: float) -> "HermitianMeasurementMatrix":
        """Map divided by ``factor`` and sigma divided by it (whitening with ``factor = sigma``)."""
        if self.is_linear:
            return HermitianMeasurementMatrix(self.kind, self.location, self.sigma / factor, phi=self.phi / factor)
        return HermitianMeasurementMatrix(self.kind, self.location, self.sigma / factor,
                                          a=self.a / factor, b=self.b)

    def restrict(self, idx: Sequence[int]) -> "HermitianMeasurementMatrix":
        """Map acting on the sub-vector ``v[idx]``; entries outside must vanish."""
        idx = np.asarray(idx)
        keep = np.zeros(self.n, dtype=bool)
        keep[idx] = True
        if np.any(~keep[self.support()]):
            raise CaseError(f"{self.kind} at {self.location} touches buses outside the subset")
        if self.is_linear:
            return HermitianMeasurementMatrix(self.kind, self.location, self.sigma, phi=self.phi[idx])
        return HermitianMeasurementMatrix(self.kind, self.location, self.sigma, a=self.a[idx], b=self.b[idx])

    def support(self) -> np.ndarray:
        if self.is_linear:
            return np.flatnonzero(np.abs(self.phi) > 0)
        mask = np.any(np.abs(self.a) > 0, axis=1) | np.any(np.abs(self.b) > 0, axis=1)
        return np.flatnonzero(mask)


def _unit(n: int, i: int) -> np.ndarray:
    e = np.zeros(n, dtype=complex)
    e[i] = 1.0
    return e


def measurement_matrix(model: AdmittanceModel, kind: str, location, sigma: float = 1.0) -> HermitianMeasurementMatrix:
    """Measurement map for ``kind`` at ``location``.

    ``location`` is a bus id for bus kinds and ``(branch_index, end)`` for
    branch kinds, ``end`` being ``"from"`` or ``"to"``.
    """
    case = model.case
    n = model.n_bus
    if kind in BUS_KINDS:
        if location not in case.index:
            raise CaseError(f"invalid location {location!r} for {kind}: unknown bus")
        i = case.index[location]
        e = _unit(n, i)
        if kind == "vmag2":
            return HermitianMeasurementMatrix(kind, location, sigma, a=e, b=e.copy())
        if kind == "pmu_v":
            return HermitianMeasurementMatrix(kind, location, sigma, phi=e)
        row = model.Y[i]
        at = e
    elif kind in BRANCH_KINDS:
        try:
            branch, end = location
            branch = int(branch)
        except (TypeError, ValueError):
            raise CaseError(f"invalid location {location!r} for {kind}: expected (branch, end)") from None
        if not 0 <= branch < case.n_branch:
            raise CaseError(f"invalid location {location!r} for {kind}: unknown branch")
        br = case.branches[branch]
        row = model.Yf[model.row(branch, end)]
        if kind == "pmu_i":
            return HermitianMeasurementMatrix(kind, (branch, end), sigma, phi=row.copy())
        at = _unit(n, case.index[br.from_bus if end == "from" else br.to_bus])
        location = (branch, end)
    else:
        raise CaseError(f"unknown measurement kind {kind!r}")

    # P = Re(S), Q = Im(S) with S^* = v^H e e^T Y v
    if kind in ("p_inj", "p_flow"):
        b = row.conj()
    else:
        b = -1j * row.conj()
    return HermitianMeasurementMatrix(kind, location, sigma, a=at, b=b)


def realify(H: np.ndarray) -> np.ndarray:
    """Real symmetric ``[[Re H, -Im H], [Im H, Re H]]`` of a Hermitian ``H``."""
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    if np.max(np.abs(H - H.conj().T), initial=0.0) > HERMITIAN_TOL:
        raise ValueError("matrix is not Hermitian")
    return realify_map(H)


def realify_map(A: np.ndarray) -> np.ndarray:
    """Real representation of a complex linear map (no symmetry required)."""
    A = np.atleast_2d(A)
    return np.block([[A.real, -A.imag], [A.imag, A.real]])


def laplacian_h0(case: GridCase) -> np.ndarray:
    """Graph Laplacian weighted by ``|b_nk|`` (PSD, rank ``N-1``, ``H0 @ 1 = 0``)."""
    n = case.n_bus
    L = np.zeros((n, n))
    for br in case.branches:
        f, t = case.index[br.from_bus], case.index[br.to_bus]
        w = abs(br.b)
        L[f, f] += w
        L[t, t] += w
        L[f, t] -= w
        L[t, f] -= w
    eig = np.linalg.eigvalsh(L)
    scale = max(eig[-1], 1.0)
    assert np.allclose(L @ np.ones(n), 0.0, atol=1e-9 * scale)
    assert eig[0] > -1e-9 * scale
    assert eig[1] > 1e-12 * scale, "H0 must have rank N-1 (zero-susceptance branches disconnect it)"
    return L.astype(complex)


def polar_injections(Y: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive injections from the polar power-flow sums."""
    V, th = np.abs(v), np.angle(v)
    G, B = Y.real, Y.imag
    d = th[:, None] - th[None, :]
    P = V * np.sum(V[None, :] * (G * np.cos(d) + B * np.sin(d)), axis=1)
    Q = V * np.sum(V[None, :] * (G * np.sin(d) - B * np.cos(d)), axis=1)
    return P, Q


def flat_profile(n: int) -> np.ndarray:
    return np.ones(n, dtype=complex)


def branch_locations(case: GridCase, ends: Iterable[str] = ("from", "to")) -> list[tuple[int, str]]:
    return [(i, end) for end in ends for i in range(case.n_branch)]
