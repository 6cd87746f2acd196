"""Dynamic state estimation.

* Online projected-gradient tracking of the lifted state with regret
  accounting against the best fixed lifted state in hindsight.
* Holt double-exponential smoothing as a model-free transition identifier.
* Extended Kalman filtering in real coordinates (Joseph covariance update).
* Moving-horizon estimation over a sliding window, by Gauss-Newton or via
  the semidefinite relaxation of the windowed cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import GridStateError, SolverError
from .grid import realify_map
from .measurements import (MeasurementSet, evaluate_real, real_jacobian, wls_cost)
from .sdp import RowSet, SDPProblem, require, solve_sdp
from .static import _joint_eq, _linear_block, _scada_rows, rank1_recover

PSD_TOL = 1e-10


def _psd_check(M: np.ndarray, what: str, tol: float = PSD_TOL) -> None:
    M = np.asarray(M)
    if not np.allclose(M, M.conj().T, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise GridStateError(f"{what} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (M + M.conj().T)).min() < -tol * max(1.0, np.abs(M).max()):
        raise GridStateError(f"{what} must be positive semidefinite")


def project_psd(X: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix: eigen-decompose and clip negative eigenvalues."""
    S = 0.5 * (X + X.conj().T)
    lam, U = np.linalg.eigh(S)
    out = (U * np.maximum(lam, 0.0)) @ U.conj().T
    return 0.5 * (out + out.conj().T)


@dataclass
class DynamicsModel:
    """``v_{t+1} = F v_t + g + w``, ``w ~ (0, Q)``; ``Q`` over real coordinates ``[Re; Im]``."""

    F: np.ndarray
    g: np.ndarray
    Q: np.ndarray
    R: np.ndarray | None = None

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=complex))
        n = self.F.shape[0]
        self.g = np.asarray(self.g, dtype=complex).reshape(n)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if self.Q.shape != (2 * n, 2 * n):
            raise GridStateError(f"Q must be {2 * n} x {2 * n}")
        _psd_check(self.Q, "Q")
        if self.R is not None:
            self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
            _psd_check(self.R, "R")

    @property
    def n(self) -> int:
        return self.F.shape[0]

    def real_F(self) -> np.ndarray:
        return realify_map(self.F)

    def real_g(self) -> np.ndarray:
        return np.concatenate([self.g.real, self.g.imag])

    def predict(self, v: np.ndarray) -> np.ndarray:
        return self.F @ v + self.g


# -- Holt identification -------------------------------------------------------

class HoltSmoother:
    """Entrywise Holt smoothing of an estimate stream.

    Level ``a_t = alpha v_t + (1-alpha)(a_{t-1} + b_{t-1})`` and trend
    ``b_t = beta (a_t - a_{t-1}) + (1-beta) b_{t-1}``, started from
    ``a_0 = v_0`` and ``b_0 = 0``.
    """

    def __init__(self, alpha: float = 0.8, beta: float = 0.5):
        if not (0 < alpha <= 1 and 0 <= beta < 1):
            raise ValueError("Holt parameters need alpha in (0, 1] and beta in [0, 1)")
        self.alpha, self.beta = alpha, beta
        self.a = None
        self.b = None

    def transition(self):
        """``(F, g)`` with ``F v_{t+1} + g = a_{t+1} + b_{t+1}`` for the next estimate ``v_{t+1}``."""
        al, be = self.alpha, self.beta
        n = len(self.a)
        F = al * (1 + be) * np.eye(n)
        g = (1 + be) * (1 - al) * (self.a + self.b) - be * self.a + (1 - be) * self.b
        return F, g

    def update(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=complex)
        if self.a is None:
            self.a, self.b = v.copy(), np.zeros_like(v)
            return self.a + self.b
        a_new = self.alpha * v + (1 - self.alpha) * (self.a + self.b)
        self.b = self.beta * (a_new - self.a) + (1 - self.beta) * self.b
        self.a = a_new
        return self.a + self.b


def holt_identify(history, alpha: float = 0.8, beta: float = 0.5, Q=None) -> DynamicsModel:
    """Transition model for the step after the last estimate in ``history``.

    The returned ``F, g`` satisfy ``F v_T + g = a_T + b_T``, the Holt forecast
    made once ``v_T`` (the last history row) is absorbed.
    """
    history = np.atleast_2d(np.asarray(history, dtype=complex))
    if history.shape[0] < 2:
        raise GridStateError("Holt identification needs at least 2 history points")
    hs = HoltSmoother(alpha, beta)
    for v in history[:-1]:
        hs.update(v)
    F, g = hs.transition()
    n = history.shape[1]
    return DynamicsModel(F, g, np.zeros((2 * n, 2 * n)) if Q is None else Q)


# -- extended Kalman filter ----------------------------------------------------

@dataclass
class LinearObservation:
    """Real linear observation ``z = H x + noise`` over ``x = [Re v; Im v]``."""

    H: np.ndarray
    z: np.ndarray
    R: np.ndarray


@dataclass
class TrackerState:
    v: np.ndarray
    P: np.ndarray
    t: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=complex)
        self.P = np.asarray(self.P, dtype=float)
        _psd_check(self.P, "P", tol=1e-9)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.v.real, self.v.imag])


def _observation(obs, v_pred: np.ndarray):
    x = np.concatenate([v_pred.real, v_pred.imag])
    if isinstance(obs, LinearObservation):
        H = np.atleast_2d(obs.H)
        return H, np.asarray(obs.z, float) - H @ x, np.atleast_2d(obs.R)
    plan = obs.plan
    J = real_jacobian(plan, v_pred)
    innov = obs.real_values() - evaluate_real(plan, v_pred)
    return J, innov, plan.real_covariance()


def ekf_step(tracker: TrackerState, obs, dyn: DynamicsModel) -> TrackerState:
    """Predict with ``dyn`` and correct with ``obs`` (measurement set or linear observation)."""
    Fr = dyn.real_F()
    v_pred = dyn.predict(tracker.v)
    P_pred = Fr @ tracker.P @ Fr.T + dyn.Q
    J, innov, R = _observation(obs, v_pred)
    if dyn.R is not None:
        R = dyn.R
    S = J @ P_pred @ J.T + R
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SolverError("innovation covariance is singular", {"t": tracker.t + 1}) from None
    K = np.linalg.solve(L.T, np.linalg.solve(L, J @ P_pred)).T
    n = len(v_pred)
    dx = K @ innov
    v_new = v_pred + dx[:n] + 1j * dx[n:]
    IKJ = np.eye(2 * n) - K @ J
    P_new = IKJ @ P_pred @ IKJ.T + K @ R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    tracker.history.append(v_new)
    tracker.v, tracker.P, tracker.t = v_new, P_new, tracker.t + 1
    return tracker


class HoltEKF:
    """EKF whose transition comes from Holt smoothing of its own filtered estimates."""

    def __init__(self, v0, P0, Q, alpha: float = 0.8, beta: float = 0.5):
        self.state = TrackerState(v0, P0)
        self.holt = HoltSmoother(alpha, beta)
        self.holt.update(self.state.v)
        self.Q = np.asarray(Q, dtype=float)

    def step(self, obs) -> np.ndarray:
        F, g = self.holt.transition()
        ekf_step(self.state, obs, DynamicsModel(F, g, self.Q))
        self.holt.update(self.state.v)
        return self.state.v


# -- online projected gradient --------------------------------------------------

def _plan_rows(mset: MeasurementSet):
    plan = mset.plan
    if plan.has_pmu:
        raise GridStateError("online tracking handles SCADA entries only")
    return _scada_rows(plan)


def online_loss(mset: MeasurementSet, V: np.ndarray) -> float:
    """``f_t(V) = sum_m (z_m - tr(H_m V))^2``."""
    r = mset.z.real - _plan_rows(mset).values(V)
    return float(r @ r)


def online_psse_step(V: np.ndarray, mset: MeasurementSet, mu: float) -> np.ndarray:
    """One projected gradient step ``Proj_PSD[V - mu grad f_t(V)]``."""
    if not mu > 0:
        raise ValueError("step size must be positive")
    rows = _plan_rows(mset)
    coef = 2.0 * (rows.values(V) - mset.z.real)
    return project_psd(V - mu * rows.combine(coef))


def default_step_constant(mset: MeasurementSet) -> float:
    """``c = 1 / (max_m ||H_m||_F * M_t)``."""
    norms = [np.linalg.norm(e.matrix) for e in mset.plan.entries]
    return 1.0 / (max(norms) * mset.plan.size)


class OnlineTracker:
    """Projected-gradient tracker with step ``c / sqrt(t)``; logs per-round losses."""

    def __init__(self, V0: np.ndarray, c: float | None = None):
        self.V = project_psd(np.asarray(V0, dtype=complex))
        self.c = c
        self.t = 0
        self.losses = []
        self.sets = []
        self.iterates = []

    def step(self, mset: MeasurementSet) -> np.ndarray:
        self.t += 1
        c = default_step_constant(mset) if self.c is None else self.c
        self.iterates.append(self.V)
        self.losses.append(online_loss(mset, self.V))
        self.sets.append(mset)
        self.V = online_psse_step(self.V, mset, c / np.sqrt(self.t))
        return rank1_recover(self.V, "eig")


def best_fixed_action(sets: list, gap_tol: float = 1e-9, rel_gap: float = 1e-9):
    """``argmin_{V PSD} sum_t f_t(V)`` by the barrier solver.

    Rounds sharing a plan are merged: ``sum_t (z_tm - s_m)^2`` equals
    ``T (zbar_m - s_m)^2`` plus a constant, which keeps the SDP small.
    """
    groups = {}
    for s in sets:
        groups.setdefault(id(s.plan), []).append(s)
    rows, ys, ws, const = None, [], [], 0.0
    for grp in groups.values():
        Z = np.array([s.z.real for s in grp])
        zbar = Z.mean(axis=0)
        const += float(np.sum((Z - zbar) ** 2))
        r = _plan_rows(grp[0])
        rows = r if rows is None else rows.concat(r)
        ys.append(zbar)
        ws.append(np.full(len(zbar), float(len(grp))))
    n = sets[0].plan.n_bus
    prob = SDPProblem(n, rows, np.concatenate(ys), np.concatenate(ws), const=const)
    res = require(solve_sdp(prob, gap_tol=gap_tol, rel_gap=rel_gap), "best fixed action")
    return res.W, res.objective


def regret_report(tracker: OnlineTracker, T: int | None = None) -> dict:
    """``R_f(T) = sum_t f_t(V_t) - min_V sum_t f_t(V)`` over the first ``T`` rounds."""
    T = tracker.t if T is None else T
    if T < 1 or T > tracker.t:
        raise GridStateError("regret needs between 1 and the completed number of rounds")
    V_star, best = best_fixed_action(tracker.sets[:T])
    total = float(np.sum(tracker.losses[:T]))
    return {"T": T, "regret": total - best, "tracker_loss": total, "best_fixed_loss": best,
            "per_round": list(tracker.losses[:T]), "best_fixed_action": V_star}


# -- moving horizon ------------------------------------------------------------

def transition_products(Fs: list, gs: list | None = None):
    """``T_0 = I``, ``T_{s+1} = F_s T_s`` and offsets ``c_{s+1} = F_s c_s + g_s``."""
    n = np.atleast_2d(Fs[0]).shape[0] if Fs else None
    return _products(Fs, gs, n)


def _products(Fs, gs, n):
    Ts = [np.eye(n, dtype=complex)]
    cs = [np.zeros(n, dtype=complex)]
    for s, F in enumerate(Fs):
        F = np.atleast_2d(np.asarray(F, dtype=complex))
        g = np.zeros(n, complex) if gs is None else np.asarray(gs[s], dtype=complex)
        Ts.append(F @ Ts[-1])
        cs.append(F @ cs[-1] + g)
    return Ts, cs


def mhe_cost(window: list, Ts, cs, v, prior, lam: float) -> float:
    cost = sum(wls_cost(m, T @ v + c) for m, T, c in zip(window, Ts, cs))
    return cost + lam * float(np.sum(np.abs(v - prior) ** 2))


def mhe_solve(window: list, Fs: list, prior, lam: float, mode: str = "gn", gs: list | None = None,
              max_iters: int = 50, tol: float = 1e-12):
    """Window estimate from ``L+1`` sets (oldest first) and ``L`` transitions.

    Minimizes ``sum_s WLS_s(T_s v + c_s) + lam ||v - prior||^2`` over the
    oldest state ``v`` and propagates it through the window.  Returns the
    list of smoothed states, oldest first.
    """
    if len(Fs) != len(window) - 1:
        raise GridStateError(f"a window of {len(window)} sets needs {len(window) - 1} transitions")
    n = window[0].plan.n_bus
    prior = np.asarray(prior, dtype=complex)
    Ts, cs = _products(Fs, gs, n)
    try:
        if mode == "gn":
            v = _mhe_gn(window, Ts, cs, prior, lam, max_iters, tol)
        elif mode == "sdr":
            v = _mhe_sdr(window, Ts, cs, prior, lam)
        else:
            raise ValueError(f"unknown MHE mode {mode!r}")
    except SolverError as exc:
        raise SolverError(f"moving-horizon solve failed (window of {len(window)}, t={window[-1].t}): {exc}",
                          exc.diagnostics) from None
    return [T @ v + c for T, c in zip(Ts, cs)]


def _mhe_gn(window, Ts, cs, prior, lam, max_iters, tol):
    n = len(prior)
    whit = [1.0 / m.plan.real_sigmas() for m in window]
    Tr = [realify_map(T) for T in Ts]

    def residual(v):
        parts = [w * (m.real_values() - evaluate_real(m.plan, T @ v + c))
                 for m, w, T, c in zip(window, whit, Ts, cs)]
        if lam > 0:
            d = v - prior
            parts.append(np.sqrt(lam) * np.concatenate([d.real, d.imag]))
        return np.concatenate(parts)

    def jac(v):
        blocks = [-(w[:, None] * real_jacobian(m.plan, T @ v + c)) @ R
                  for m, w, T, c, R in zip(window, whit, Ts, cs, Tr)]
        if lam > 0:
            blocks.append(np.sqrt(lam) * np.eye(2 * n))
        return np.vstack(blocks)

    v = prior.copy()
    r = residual(v)
    cost = float(r @ r)
    for _ in range(max_iters):
        J = jac(v)
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        dv = dx[:n] + 1j * dx[n:]
        slope = 2.0 * float(r @ (J @ dx))
        step = 1.0
        while step > 1e-10:
            r_new = residual(v + step * dv)
            c_new = float(r_new @ r_new)
            if c_new <= cost + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        v, r = v + step * dv, r_new
        done = cost - c_new <= tol * max(cost, 1.0)
        cost = c_new
        if done:
            break
    return v


def _mhe_sdr(window, Ts, cs, prior, lam):
    """Joint block ``[[V, v], [v^H, 1]]``; window maps pulled back through ``[T_s, c_s]``."""
    n = len(prior)
    rows = None
    ys, ws = [], []
    C = np.zeros((n + 1, n + 1), dtype=complex)
    for m, T, c in zip(window, Ts, cs):
        plan = m.plan
        Tc = np.hstack([T, c[:, None]])
        w = 1.0 / plan.sigmas ** 2
        quad = ~plan.linear_mask
        if quad.any():
            r = _scada_rows(plan, transform=Tc)
            rows = r if rows is None else rows.concat(r)
            ys.append(m.z.real[quad])
            ws.append(w[quad])
        if plan.has_pmu:
            lin = plan.linear_mask
            Phi = np.array([e.phi for e in plan.entries if e.is_linear]) @ Tc
            C += _linear_block(Phi[:, :n], m.z[lin] - Phi[:, n], w[lin])
    if lam > 0:
        C += lam * _linear_block(np.eye(n), prior, np.ones(n))
    if rows is None:
        rows = RowSet.empty(n + 1)
        ys, ws = [np.zeros(0)], [np.zeros(0)]
    prob = SDPProblem(n + 1, rows, np.concatenate(ys), np.concatenate(ws), C=C, eq=_joint_eq(n), e=[1.0])
    res = require(solve_sdp(prob), "moving-horizon relaxation")
    W = res.W
    u = rank1_recover(W, "eig")
    return u[:n] / u[n]
