"""Bad-data analysis on linear(ized) models ``z = H v + o + noise`` with unit noise.

Detection (chi-square on the residual energy), identification (largest
normalized residual and its leave-one-out characterization), robust fits
(Huber via l1-penalized outliers, least absolute value), and observability
margins (critical measurements, measurement distance, stealth attacks).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import GridStateError, UnobservableError
from .measurements import MeasurementSet, evaluate_real, real_jacobian

CRITICAL_TOL = 1e-9


@dataclass
class LinearModel:
    H: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if self.H.shape[0] != len(self.z):
            raise ValueError("H and z disagree on the number of measurements")
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.z))):
            raise ValueError("model entries must be finite")

    @property
    def M(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    def drop(self, rows) -> "LinearModel":
        keep = np.setdiff1d(np.arange(self.M), np.atleast_1d(rows))
        return LinearModel(self.H[keep], self.z[keep])

    def with_z(self, z) -> "LinearModel":
        return LinearModel(self.H, z)


def linear_model(mset: MeasurementSet, v_lin=None) -> LinearModel:
    """Whitened real model over ``[Re v; Im v]``.

    Exact when every entry is a PMU reading; otherwise the measurement map is
    frozen at ``v_lin`` (one Gauss-Newton linearization).
    """
    plan = mset.plan
    if plan.cov is not None:
        raise GridStateError("linear models need uncorrelated noise; prewhiten first")
    sig = plan.real_sigmas()
    if plan.has_pmu and plan.linear_mask.all():
        J = real_jacobian(plan, np.zeros(plan.n_bus))
        return LinearModel(J / sig[:, None], mset.real_values() / sig)
    if v_lin is None:
        raise ValueError("a linearization point is required for quadratic entries")
    v_lin = np.asarray(v_lin, dtype=complex)
    J = real_jacobian(plan, v_lin)
    x = np.concatenate([v_lin.real, v_lin.imag])
    z = mset.real_values() - evaluate_real(plan, v_lin) + J @ x
    return LinearModel(J / sig[:, None], z / sig)


def to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x) // 2
    return x[:n] + 1j * x[n:]


@dataclass
class BadDataReport:
    test: str
    statistic: float
    threshold: float
    flagged: list
    normalized_residuals: list = field(default_factory=list)
    critical: list = field(default_factory=list)
    argmax: int | None = None

    @property
    def rejected(self) -> bool:
        return self.statistic > self.threshold

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _full_rank(H: np.ndarray) -> bool:
    if H.shape[0] < H.shape[1]:
        return False
    s = np.linalg.svd(H, compute_uv=False)
    return bool(s[-1] > 1e-10 * max(s[0], 1e-300))


def lse(model: LinearModel) -> np.ndarray:
    if not _full_rank(model.H):
        raise UnobservableError("unobservable model")
    return np.linalg.lstsq(model.H, model.z, rcond=None)[0]


def projection_matrix(model: LinearModel) -> np.ndarray:
    """``P = I - H (H^T H)^-1 H^T``."""
    H = model.H
    if not _full_rank(H):
        raise UnobservableError("unobservable model")
    Q, _ = np.linalg.qr(H)
    P = np.eye(model.M) - Q @ Q.T
    P = 0.5 * (P + P.T)
    assert np.allclose(P @ P, P, atol=1e-9)
    assert np.allclose(P @ H, 0.0, atol=1e-9 * max(1.0, np.abs(H).max()))
    d = np.diag(P)
    assert np.all(d > -1e-9) and np.all(d < 1 + 1e-9)
    return P


# -- chi-square quantile -------------------------------------------------------

def _lower_gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    k = a
    for _ in range(10000):
        k += 1.0
        term *= x / k
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _lower_gamma_series(a, x)
    return _upper_gamma_cf(a, x)


def chi2_sf(x: float, df: int) -> float:
    return regularized_gamma_q(df / 2.0, x / 2.0)


def chi2_quantile(df: int, alpha: float) -> float:
    """``x`` with ``P(chi2_df > x) = alpha``, by bisection."""
    if df < 1:
        raise ValueError("degrees of freedom must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_sf(hi, df) > alpha:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_sf(mid, df) > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return 0.5 * (lo + hi)


# -- detection and identification ----------------------------------------------

def chi_square_test(model: LinearModel, alpha: float = 0.01) -> BadDataReport:
    P = projection_matrix(model)
    r = P @ model.z
    stat = float(r @ r)
    dof = model.M - model.N
    if dof < 1:
        raise UnobservableError("no redundancy: chi-square test needs M > N")
    thr = chi2_quantile(dof, alpha)
    return BadDataReport("chi2", stat, thr, list(range(model.M)) if stat > thr else [])


def normalized_residuals(model: LinearModel, P: np.ndarray | None = None):
    """``|r_m| / sqrt(P_mm)``; critical entries (``P_mm <= tol``) get NaN."""
    P = projection_matrix(model) if P is None else P
    r = P @ model.z
    d = np.diag(P)
    crit = d <= CRITICAL_TOL
    out = np.full(model.M, np.nan)
    out[~crit] = np.abs(r[~crit]) / np.sqrt(d[~crit])
    return out, np.flatnonzero(crit)


def lnr_test(model: LinearModel, threshold: float = 3.0) -> BadDataReport:
    rn, crit = normalized_residuals(model)
    if np.all(np.isnan(rn)):
        return BadDataReport("lnr", 0.0, threshold, [], list(rn), crit.tolist(), None)
    m = int(np.nanargmax(rn))
    stat = float(rn[m])
    return BadDataReport("lnr", stat, threshold, [m] if stat > threshold else [],
                         [float(x) for x in rn], crit.tolist(), m)


def leave_one_out_errors(model: LinearModel) -> np.ndarray:
    """``||r_(m)||^2`` from ``M`` explicit refits without row ``m`` (inf if unobservable)."""
    out = np.full(model.M, np.inf)
    for m in range(model.M):
        sub = model.drop(m)
        if not _full_rank(sub.H):
            continue
        v = np.linalg.lstsq(sub.H, sub.z, rcond=None)[0]
        r = sub.z - sub.H @ v
        out[m] = float(r @ r)
    return out


def lnr_iterate(model: LinearModel, threshold: float = 3.0, max_removals: int | None = None):
    """Remove the largest normalized residual until the test passes.

    Returns ``(v_hat, removed)`` with ``removed`` listing original indices.
    Raises :class:`UnobservableError` when the flagged entry is critical or
    its removal would break observability.
    """
    idx = np.arange(model.M)
    cur = model
    removed = []
    limit = model.M - model.N if max_removals is None else max_removals
    while True:
        rep = lnr_test(cur, threshold)
        if not rep.rejected:
            return lse(cur), removed
        if len(removed) >= limit:
            raise UnobservableError(f"identifiability lost after {len(removed)} removals")
        m = rep.argmax
        nxt = cur.drop(m)
        if not _full_rank(nxt.H):
            raise UnobservableError(f"identifiability lost after {len(removed)} removals "
                                    f"(entry {int(idx[m])} is critical)")
        removed.append(int(idx[m]))
        idx = np.delete(idx, m)
        cur = nxt


# -- robust estimators ---------------------------------------------------------

def soft_threshold(x, lam: float):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def huber_cost(model: LinearModel, v, o, lam: float) -> float:
    r = model.z - model.H @ v - o
    return 0.5 * float(r @ r) + lam * float(np.abs(o).sum())


def huber_solve(model: LinearModel, lam: float = 1.34, tol: float = 1e-8, max_iter: int = 10000,
                return_trace: bool = False):
    """``min 0.5 ||z - H v - o||^2 + lam ||o||_1`` by exact alternating minimization."""
    if not _full_rank(model.H):
        raise UnobservableError("unobservable model")
    pinv = np.linalg.pinv(model.H)
    o = np.zeros(model.M)
    v = pinv @ model.z
    cost = huber_cost(model, v, o, lam)
    trace = [cost]
    for _ in range(max_iter):
        o = soft_threshold(model.z - model.H @ v, lam)
        trace.append(huber_cost(model, v, o, lam))
        v = pinv @ (model.z - o)
        new = huber_cost(model, v, o, lam)
        trace.append(new)
        if cost - new <= tol * max(1.0, cost):
            cost = new
            break
        cost = new
    if return_trace:
        return v, o, trace
    return v, o


def lav_solve(model: LinearModel, eps: float = 1e-6, tol: float = 1e-8, max_iter: int = 500):
    """``min ||z - H v||_1`` by iteratively reweighted least squares.

    Returns ``(v_hat, info)`` where ``info`` carries the cost and the norm of
    the best subgradient (zero residuals may take any sign in [-1, 1]).
    """
    if not _full_rank(model.H):
        raise UnobservableError("unobservable model")
    H, z = model.H, model.z
    v = np.linalg.lstsq(H, z, rcond=None)[0]
    cost = float(np.abs(z - H @ v).sum())
    it = 0
    for it in range(1, max_iter + 1):
        w = 1.0 / np.maximum(np.abs(z - H @ v), eps)
        sw = np.sqrt(w)
        v_new = np.linalg.lstsq(H * sw[:, None], z * sw, rcond=None)[0]
        new = float(np.abs(z - H @ v_new).sum())
        if new <= cost:
            v = v_new
        if abs(cost - new) <= tol * max(cost, 1e-12) or new > cost:
            cost = min(cost, new)
            break
        cost = new
    r = z - H @ v
    active = np.abs(r) > 1e2 * eps
    g_fixed = -H[active].T @ np.sign(r[active])
    free = H[~active]
    if free.shape[0]:
        # choose multipliers in [-1, 1] on interpolated rows to cancel the gradient
        u = np.clip(np.linalg.lstsq(free.T, -g_fixed, rcond=None)[0], -1, 1)
        sub = g_fixed + free.T @ u
    else:
        sub = g_fixed
    return v, {"cost": float(np.abs(r).sum()), "subgradient": float(np.linalg.norm(sub)), "iterations": it}


# -- observability margins -----------------------------------------------------

def critical_measurements(model: LinearModel) -> list:
    """Entries whose removal destroys column rank.

    Computed from the projector diagonal and cross-checked by explicit row
    deletion.
    """
    P = projection_matrix(model)
    by_projection = set(np.flatnonzero(np.diag(P) <= CRITICAL_TOL).tolist())
    by_deletion = {m for m in range(model.M) if not _full_rank(model.drop(m).H)}
    if by_projection != by_deletion:
        raise GridStateError(f"critical-measurement characterizations disagree: "
                             f"{sorted(by_projection)} vs {sorted(by_deletion)}")
    return sorted(by_projection)


@dataclass
class DistanceResult:
    D: int
    K_o: int
    K_i: int
    partial: bool
    witness: tuple = ()


def measurement_distance(model: LinearModel, limit: int | None = None) -> DistanceResult:
    """Smallest number of rows whose deletion collapses the column rank of ``H``.

    That equals ``min ||H dv||_0`` over nonzero ``dv``.  Exhaustive search by
    increasing subset size; ``limit`` caps the size examined, in which case
    ``D`` is a lower bound and ``partial`` is set.
    """
    H = model.H
    if not _full_rank(H):
        return DistanceResult(0, -1, -1, False, ())
    cap = model.M if limit is None else min(limit, model.M)
    for size in range(1, cap + 1):
        for S in itertools.combinations(range(model.M), size):
            if not _full_rank(np.delete(H, S, axis=0)):
                return DistanceResult(size, size - 1, (size - 1) // 2, False, S)
    return DistanceResult(cap + 1, cap, cap // 2, True, ())


def stealth_attack(model: LinearModel, dv) -> np.ndarray:
    """Attack ``o = H dv``: data ``z + o`` fit ``v + dv`` with the same residual."""
    dv = np.asarray(dv, dtype=float)
    if not np.any(dv):
        raise ValueError("state shift must be nonzero")
    o = model.H @ dv
    P = projection_matrix(model)
    assert np.linalg.norm(P @ o) <= 1e-9 * max(1.0, np.linalg.norm(o))
    return o


def admm_robust(*args, **kwargs):
    """Decentralized Huber estimation; see :func:`gridstate.distributed.admm_robust`."""
    from .distributed import admm_robust as impl
    return impl(*args, **kwargs)
