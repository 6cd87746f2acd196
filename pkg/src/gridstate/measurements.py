"""Measurement plans, the measurement map h(v), its derivatives, and the FIM/CRLB.

Real-valued stacking convention used throughout: every quadratic entry
contributes one real row and every PMU entry two (real part, then imaginary
part).  Both PMU components carry the entry's ``sigma``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import CaseError, UnobservableError
from .grid import (ALL_KINDS, BUS_KINDS, AdmittanceModel, HermitianMeasurementMatrix,
                   measurement_matrix)

PINV_RTOL = 1e-10

DEFAULT_SIGMA = {"vmag2": 0.02, "p_inj": 0.05, "q_inj": 0.05, "p_flow": 0.05, "q_flow": 0.05,
                 "pmu_v": 0.01, "pmu_i": 0.01}

# x-axis of the measurement-type sweep: squared magnitudes, then flows at the
# to-end and from-end (active, then reactive), then injections
SWEEP_ORDER = (
    ("vmag2", None), ("p_flow", "to"), ("p_flow", "from"),
    ("q_flow", "to"), ("q_flow", "from"), ("p_inj", None), ("q_inj", None),
)
SWEEP_LABELS = ("V2", "P_kn", "P_nk", "Q_kn", "Q_nk", "P_n", "Q_n")


@dataclass(frozen=True)
class MeasurementPlan:
    model: AdmittanceModel
    entries: tuple[HermitianMeasurementMatrix, ...]
    cov: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise CaseError("measurement plan is empty")
        for i, e in enumerate(self.entries):
            if not (e.sigma > 0 or (self.cov is not None)):
                raise CaseError("sigma must be positive", f"entries[{i}].sigma")
            if e.n != self.model.n_bus:
                raise CaseError("entry dimension does not match the network", f"entries[{i}]")
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if self.has_pmu:
                raise CaseError("full noise covariance is supported for SCADA-only plans")
            if cov.shape != (self.size, self.size) or not np.allclose(cov, cov.T, atol=1e-12):
                raise CaseError("noise covariance must be a symmetric M x M matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise CaseError("noise covariance is not positive definite") from None
            object.__setattr__(self, "cov", cov)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def n_bus(self) -> int:
        return self.model.n_bus

    @property
    def linear_mask(self) -> np.ndarray:
        return np.array([e.is_linear for e in self.entries])

    @property
    def has_pmu(self) -> bool:
        return bool(self.linear_mask.any())

    @property
    def sigmas(self) -> np.ndarray:
        if self.cov is not None:
            return np.sqrt(np.diag(self.cov))
        return np.array([e.sigma for e in self.entries])

    @property
    def real_size(self) -> int:
        return self.size + int(self.linear_mask.sum())

    def real_sigmas(self) -> np.ndarray:
        return np.repeat(self.sigmas, np.where(self.linear_mask, 2, 1))

    def real_covariance(self) -> np.ndarray:
        if self.cov is not None:
            return self.cov
        return np.diag(self.real_sigmas() ** 2)

    def subset(self, idx: Sequence[int]) -> "MeasurementPlan":
        idx = list(idx)
        cov = None if self.cov is None else self.cov[np.ix_(idx, idx)]
        return MeasurementPlan(self.model, tuple(self.entries[i] for i in idx), cov)

    def with_sigma_scale(self, factor: float) -> "MeasurementPlan":
        entries = tuple(replace(e, sigma=e.sigma * factor) for e in self.entries)
        cov = None if self.cov is None else self.cov * factor ** 2
        return MeasurementPlan(self.model, entries, cov)


@dataclass(frozen=True)
class MeasurementSet:
    plan: MeasurementPlan
    z: np.ndarray
    t: int = 0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=complex)
        if z.shape != (self.plan.size,):
            raise CaseError(f"expected {self.plan.size} readings, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise CaseError("readings must be finite")
        object.__setattr__(self, "z", z)

    def real_values(self) -> np.ndarray:
        return stack_real(self.plan, self.z)


def stack_real(plan: MeasurementPlan, values: np.ndarray) -> np.ndarray:
    """Real stacking of a complex value vector (see module docstring)."""
    out = []
    for val, lin in zip(values, plan.linear_mask):
        out.append(val.real)
        if lin:
            out.append(val.imag)
    return np.array(out)


def unstack_real(plan: MeasurementPlan, values: np.ndarray) -> np.ndarray:
    out = np.empty(plan.size, dtype=complex)
    pos = 0
    for i, lin in enumerate(plan.linear_mask):
        if lin:
            out[i] = complex(values[pos], values[pos + 1])
            pos += 2
        else:
            out[i] = values[pos]
            pos += 1
    return out


# -- plan construction -------------------------------------------------------

def _entry_from_record(model: AdmittanceModel, rec: dict, where: str) -> HermitianMeasurementMatrix:
    kind = rec.get("kind")
    if kind not in ALL_KINDS:
        raise CaseError(f"unknown measurement kind {kind!r}", where)
    sigma = float(rec.get("sigma", DEFAULT_SIGMA[kind]))
    if not sigma > 0:
        raise CaseError("sigma must be positive", where + ".sigma")
    case = model.case
    if kind in BUS_KINDS:
        if "bus" not in rec:
            raise CaseError("missing field 'bus'", where)
        location = int(rec["bus"])
    else:
        if "branch" not in rec or "end" not in rec:
            raise CaseError("missing field 'branch' or 'end'", where)
        br = rec["branch"]
        if isinstance(br, (list, tuple)):
            br = case.find_branch(int(br[0]), int(br[1]))
        location = (int(br), rec["end"])
    try:
        return measurement_matrix(model, kind, location, sigma)
    except CaseError as exc:
        raise CaseError(str(exc), where) from None


def plan_from_records(model: AdmittanceModel, records: Sequence[dict]) -> MeasurementPlan:
    if not isinstance(records, (list, tuple)):
        raise CaseError("measurement plan must be a list of entries")
    return MeasurementPlan(model, tuple(_entry_from_record(model, r, f"entries[{i}]") for i, r in enumerate(records)))


def load_plan(document, model: AdmittanceModel) -> MeasurementPlan:
    """Plan from JSON text, a path, or parsed data.

    Accepts either a bare list of entries or an object with an ``entries``
    list (other keys, e.g. notes, are ignored).
    """
    if isinstance(document, (str, Path)) and not str(document).lstrip().startswith(("[", "{")):
        path = Path(document)
        if not path.exists():
            raise CaseError(f"plan not found: {path}")
        document = path.read_text()
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise CaseError(f"malformed plan JSON: {exc.msg}", f"line {exc.lineno}") from None
    if isinstance(document, dict):
        document = document.get("entries")
    return plan_from_records(model, document)


def plan_to_records(plan: MeasurementPlan) -> list[dict]:
    out = []
    for e in plan.entries:
        rec = {"kind": e.kind}
        if e.kind in BUS_KINDS:
            rec["bus"] = e.location
        else:
            rec["branch"], rec["end"] = e.location
        rec["sigma"] = e.sigma
        out.append(rec)
    return out


def _records_for(model: AdmittanceModel, kind: str, end: str | None, sigma: float | None) -> list[dict]:
    sig = DEFAULT_SIGMA[kind] if sigma is None else sigma
    if kind in BUS_KINDS:
        return [{"kind": kind, "bus": b, "sigma": sig} for b in model.case.bus_ids]
    ends = ("from", "to") if end is None else (end,)
    return [{"kind": kind, "branch": i, "end": e, "sigma": sig}
            for e in ends for i in range(model.case.n_branch)]


_TOKENS = {
    "vmag2_all": [("vmag2", None)],
    "pinj_all": [("p_inj", None)],
    "qinj_all": [("q_inj", None)],
    "pflow_from": [("p_flow", "from")],
    "pflow_to": [("p_flow", "to")],
    "pflow_both_ends": [("p_flow", "from"), ("p_flow", "to")],
    "qflow_from": [("q_flow", "from")],
    "qflow_to": [("q_flow", "to")],
    "qflow_both_ends": [("q_flow", "from"), ("q_flow", "to")],
    "pmu_v_all": [("pmu_v", None)],
    "pmu_i_from": [("pmu_i", "from")],
    "full": list(SWEEP_ORDER),
}


def generate_plan(model: AdmittanceModel, spec: str, sigma: dict | None = None) -> MeasurementPlan:
    """Plan from a generator expression such as ``"vmag2_all + pflow_both_ends"``.

    ``sweep:k`` selects the first ``k`` measurement types of the sweep order.
    ``sigma`` optionally overrides the per-kind noise levels.
    """
    sigma = sigma or {}
    records = []
    for token in (t.strip() for t in spec.split("+")):
        if token.startswith("sweep:"):
            k = int(token.split(":", 1)[1])
            if not 1 <= k <= len(SWEEP_ORDER):
                raise CaseError(f"sweep step must be in 1..{len(SWEEP_ORDER)}")
            parts = SWEEP_ORDER[:k]
        elif token in _TOKENS:
            parts = _TOKENS[token]
        else:
            raise CaseError(f"unknown plan generator token {token!r}")
        for kind, end in parts:
            records += _records_for(model, kind, end, sigma.get(kind))
    return plan_from_records(model, records)


def sweep_plan(model: AdmittanceModel, k: int, sigma: dict | None = None) -> MeasurementPlan:
    return generate_plan(model, f"sweep:{k}", sigma)


# -- measurement-set I/O -----------------------------------------------------

def _location_text(e: HermitianMeasurementMatrix) -> str:
    if e.kind in BUS_KINDS:
        return str(e.location)
    return f"{e.location[0]}:{e.location[1]}"


def set_to_csv(mset: MeasurementSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "kind", "location", "value_re", "value_im"])
    for i, (e, z) in enumerate(zip(mset.plan.entries, mset.z)):
        w.writerow([i, e.kind, _location_text(e), repr(float(z.real)), repr(float(z.imag))])
    return buf.getvalue()


def set_from_csv(text: str, plan: MeasurementPlan, t: int = 0) -> MeasurementSet:
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) != plan.size:
        raise CaseError(f"expected {plan.size} rows, got {len(rows)}")
    z = np.empty(plan.size, dtype=complex)
    for i, (row, e) in enumerate(zip(rows, plan.entries)):
        if int(row["index"]) != i or row["kind"] != e.kind or row["location"] != _location_text(e):
            raise CaseError("row does not match the plan", f"row {i}")
        z[i] = complex(float(row["value_re"]), float(row["value_im"]))
    return MeasurementSet(plan, z, t)


# -- the measurement map -----------------------------------------------------

def _check_dim(plan: MeasurementPlan, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.shape != (plan.n_bus,):
        raise CaseError(f"state has shape {v.shape}, expected ({plan.n_bus},)")
    return v


def evaluate(plan: MeasurementPlan, v) -> np.ndarray:
    """h(v): real values for quadratic entries, complex values for PMU entries."""
    v = _check_dim(plan, v)
    out = np.empty(plan.size, dtype=complex)
    for i, e in enumerate(plan.entries):
        if e.is_linear:
            out[i] = e.phi @ v
        else:
            out[i] = e.quad(v)
    return out


def evaluate_real(plan: MeasurementPlan, v) -> np.ndarray:
    return stack_real(plan, evaluate(plan, v))


def jacobian(plan: MeasurementPlan, v) -> np.ndarray:
    """Complex ``M x N`` Jacobian: rows ``(H_m v)^H`` (quadratic) or ``phi`` (PMU)."""
    v = _check_dim(plan, v)
    J = np.empty((plan.size, plan.n_bus), dtype=complex)
    for i, e in enumerate(plan.entries):
        J[i] = e.phi if e.is_linear else e.times(v).conj()
    return J


def real_jacobian(plan: MeasurementPlan, v) -> np.ndarray:
    """Jacobian of the real stacked h with respect to ``[Re v; Im v]``."""
    v = _check_dim(plan, v)
    rows = []
    for e in plan.entries:
        if e.is_linear:
            rows.append(np.concatenate([e.phi.real, -e.phi.imag]))
            rows.append(np.concatenate([e.phi.imag, e.phi.real]))
        else:
            hv = e.times(v)
            rows.append(2.0 * np.concatenate([hv.real, hv.imag]))
    return np.array(rows)


# -- noise -------------------------------------------------------------------

def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate(plan: MeasurementPlan, v_true, seed=None, noiseless: bool = False, t: int = 0) -> MeasurementSet:
    """Readings ``h(v_true) + noise``; PMU noise is circular complex with per-part ``sigma``."""
    rng = _as_rng(seed)
    h = evaluate(plan, v_true)
    if noiseless:
        return MeasurementSet(plan, h, t)
    if plan.cov is not None:
        eps = np.linalg.cholesky(plan.cov) @ rng.standard_normal(plan.size)
        return MeasurementSet(plan, h + eps, t)
    eps_r = rng.standard_normal(plan.real_size) * plan.real_sigmas()
    return MeasurementSet(plan, h + unstack_real(plan, eps_r), t)


def prewhiten(mset: MeasurementSet) -> MeasurementSet:
    """Equivalent set with unit noise covariance."""
    plan = mset.plan
    if plan.cov is None:
        sig = plan.sigmas
        if np.all(sig == 1.0):
            return mset
        entries = tuple(e.scaled(s) for e, s in zip(plan.entries, sig))
        return MeasurementSet(MeasurementPlan(plan.model, entries), mset.z / sig, mset.t)
    lam, U = np.linalg.eigh(plan.cov)
    if lam.min() <= 0:
        raise CaseError("noise covariance is not positive definite")
    Wh = (U / np.sqrt(lam)) @ U.T
    entries = []
    for m in range(plan.size):
        a = np.hstack([Wh[m, j] * e.a for j, e in enumerate(plan.entries) if Wh[m, j] != 0])
        b = np.hstack([e.b for j, e in enumerate(plan.entries) if Wh[m, j] != 0])
        src = plan.entries[m]
        entries.append(HermitianMeasurementMatrix(src.kind, src.location, 1.0, a=a, b=b))
    return MeasurementSet(MeasurementPlan(plan.model, tuple(entries)), Wh @ mset.z.real, mset.t)


def wls_cost(mset: MeasurementSet, v) -> float:
    r = mset.real_values() - evaluate_real(mset.plan, v)
    if mset.plan.cov is not None:
        return float(r @ np.linalg.solve(mset.plan.cov, r))
    return float(np.sum((r / mset.plan.real_sigmas()) ** 2))


# -- Fisher information ------------------------------------------------------

def _score_columns(plan: MeasurementPlan, v: np.ndarray) -> np.ndarray:
    """Columns ``g`` (one per real measurement component) in conjugate coordinates."""
    cols = []
    for e in plan.entries:
        if e.is_linear:
            p = e.phi.conj()
            cols.append(np.concatenate([p / 2, p.conj() / 2]))
            cols.append(np.concatenate([1j * p / 2, -1j * p.conj() / 2]))
        else:
            hv = e.times(v)
            cols.append(np.concatenate([hv, hv.conj()]))
    return np.array(cols).T


@dataclass(frozen=True)
class FisherInformation:
    F: np.ndarray
    plan: MeasurementPlan = field(repr=False)
    v: np.ndarray = field(repr=False)

    def real(self) -> np.ndarray:
        """FIM with respect to ``[Re v; Im v]``."""
        n = self.plan.n_bus
        I = np.eye(n)
        T = np.block([[I, 1j * I], [I, -1j * I]])
        return np.real(T.conj().T @ self.F @ T)

    def null_residual(self) -> float:
        d = np.concatenate([self.v, -self.v.conj()])
        return float(np.linalg.norm(self.F @ d))


def fim(plan: MeasurementPlan, v) -> FisherInformation:
    v = _check_dim(plan, v)
    G = _score_columns(plan, v)
    Sinv = np.linalg.inv(plan.real_covariance())
    F = G @ Sinv @ G.conj().T
    F = 0.5 * (F + F.conj().T)
    return FisherInformation(F, plan, v)


def fim_real(plan: MeasurementPlan, v) -> np.ndarray:
    """``J^T Sigma^{-1} J`` from the real Jacobian (independent assembly path)."""
    J = real_jacobian(plan, v)
    return J.T @ np.linalg.solve(plan.real_covariance(), J)


def wirtinger_hessian(plan: MeasurementPlan, v, z=None) -> np.ndarray:
    """Hessian of the negative log-likelihood in conjugate coordinates, block by block.

    With ``z=None`` the residual terms are dropped, which yields the FIM.
    Diagonal noise only; quadratic entries only.
    """
    v = _check_dim(plan, v)
    if plan.has_pmu or plan.cov is not None:
        raise CaseError("block Hessian assembly covers diagonal-noise SCADA plans")
    n = plan.n_bus
    Hvv = np.zeros((n, n), dtype=complex)
    Hcv = np.zeros((n, n), dtype=complex)
    Hvc = np.zeros((n, n), dtype=complex)
    Hcc = np.zeros((n, n), dtype=complex)
    for m, e in enumerate(plan.entries):
        w = 1.0 / e.sigma ** 2
        Hm = e.matrix
        hv = Hm @ v
        hcvc = Hm.conj() @ v.conj()
        phi = 0.0 if z is None else float(np.real(z[m])) - e.quad(v)
        Hvv += w * (np.outer(hv, hv.conj()) - phi * Hm)
        Hcv += w * np.outer(hv, hcvc.conj())
        Hvc += w * np.outer(hcvc, hv.conj())
        Hcc += w * (np.outer(hcvc, hcvc.conj()) - phi * Hm.conj())
    return np.block([[Hvv, Hcv], [Hvc, Hcc]])


def _pinv(F: np.ndarray) -> tuple[np.ndarray, int]:
    U, s, Vh = np.linalg.svd(F)
    cutoff = PINV_RTOL * (s[0] if len(s) else 0.0)
    keep = s > cutoff
    inv = (Vh[keep].conj().T / s[keep]) @ U[:, keep].conj().T
    return inv, int(keep.sum())


def crlb(plan: MeasurementPlan, v, anchored: bool = False) -> np.ndarray:
    """Lower bound on the error covariance of unbiased estimators of ``v``.

    Plain form: top-left block of the FIM pseudo-inverse.  Anchored form:
    the reference-bus imaginary coordinate is removed before inversion
    (only when no PMU fixes the absolute phase).
    """
    info = fim(plan, v)
    n = plan.n_bus
    expected = 2 * n if plan.has_pmu else 2 * n - 1
    if not anchored:
        Finv, rank = _pinv(info.F)
        if rank < expected:
            raise UnobservableError(f"unobservable plan: FIM rank {rank} < {expected}")
        return Finv[:n, :n]
    J = info.real()
    keep = np.arange(2 * n)
    if not plan.has_pmu:
        keep = np.delete(keep, n + plan.model.case.ref_index)
    Jk = J[np.ix_(keep, keep)]
    s = np.linalg.svd(Jk, compute_uv=False)
    if s[-1] <= PINV_RTOL * s[0]:
        raise UnobservableError(f"unobservable plan: anchored FIM condition {s[0] / max(s[-1], 1e-300):.3g}")
    C = np.zeros((2 * n, 2 * n))
    C[np.ix_(keep, keep)] = np.linalg.inv(Jk)
    Crr, Cri, Cir, Cii = C[:n, :n], C[:n, n:], C[n:, :n], C[n:, n:]
    return (Crr + Cii) + 1j * (Cir - Cri)


def align_phase(v: np.ndarray, ref_index: int) -> np.ndarray:
    """Rotate ``v`` so the reference bus has zero angle."""
    r = v[ref_index]
    if abs(r) == 0:
        return v.copy()
    return v * (abs(r) / r)
