"""Static state estimators.

* Gauss-Newton on the WLS cost, in real coordinates with backtracking.
* Semidefinite relaxation (plain, penalized, PMU-augmented) through the
  barrier solver in :mod:`gridstate.sdp`.
* Feasible point pursuit: successive convex restrictions of the QCQP form of
  the WLS problem, each solved by a small barrier Newton method.
* PMU/SCADA fusion (MAP with a SCADA prior, or the augmented relaxation).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import CaseError, SolverError, UnobservableError
from .measurements import (MeasurementPlan, MeasurementSet, align_phase, evaluate, evaluate_real, prewhiten,
                           real_jacobian, wls_cost)
from .sdp import RowSet, SDPProblem, require, solve_sdp

log = logging.getLogger(__name__)

EIG_SPLIT_TOL = 1e-12
TIE_TOL = 1e-12


@dataclass
class SolverOptions:
    max_iters: int = 50
    tol: float = 1e-10
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    gap_tol: float = 1e-9
    rel_gap: float = 1e-7
    fpp_max_outer: int = 500
    fpp_tol: float = 1e-10
    n_samples: int = 100
    seed: int | None = None

    def __post_init__(self):
        for name in ("tol", "gap_tol", "rel_gap", "fpp_tol", "armijo", "step0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.max_iters < 1 or self.fpp_max_outer < 1:
            raise ValueError("iteration caps must be at least 1")


@dataclass
class StateEstimate:
    v_hat: np.ndarray
    cost: float
    cost_trace: list
    residuals: np.ndarray
    iterations: int
    converged: bool
    method: str = ""
    V_hat: np.ndarray | None = None
    top_eigs: tuple | None = None
    relaxed_cost: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def rank_ratio(self) -> float | None:
        if self.top_eigs is None:
            return None
        l1, l2 = self.top_eigs
        return float(l2 / l1) if l1 > 0 else float("inf")

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "v_re": [float(x) for x in self.v_hat.real],
            "v_im": [float(x) for x in self.v_hat.imag],
            "cost": float(self.cost),
            "cost_trace": [float(c) for c in self.cost_trace],
            "converged": bool(self.converged),
            "iters": int(self.iterations),
        }
        if self.top_eigs is not None:
            out["rank_ratio"] = self.rank_ratio
        if self.relaxed_cost is not None:
            out["relaxed_cost"] = float(self.relaxed_cost)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _finish(mset: MeasurementSet, v: np.ndarray, trace, iters, converged, method, **extra) -> StateEstimate:
    cost = wls_cost(mset, v)
    return StateEstimate(v, cost, list(trace), mset.z - evaluate(mset.plan, v), iters, converged, method, **extra)


def _ref(plan: MeasurementPlan) -> int:
    return plan.model.case.ref_index


# -- Gauss-Newton --------------------------------------------------------------

def _whitener(plan: MeasurementPlan):
    if plan.cov is None:
        inv = 1.0 / plan.real_sigmas()
        return lambda x: x * inv[:, None] if x.ndim == 2 else x * inv
    L = np.linalg.cholesky(plan.cov)
    return lambda x: scipy.linalg.solve_triangular(L, x, lower=True)


def gauss_newton(mset: MeasurementSet, v0=None, opts: SolverOptions | None = None) -> StateEstimate:
    """Damped Gauss-Newton on ``[Re v; Im v]``.

    Without PMU entries the reference-bus imaginary coordinate is pinned to
    zero (the start is phase-rotated accordingly).
    """
    opts = opts or SolverOptions()
    plan = mset.plan
    n = plan.n_bus
    ref = _ref(plan)
    v = np.ones(n, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    free = np.arange(2 * n)
    if not plan.has_pmu:
        v = align_phase(v, ref)
        free = np.delete(free, n + ref)
    whiten = _whitener(plan)
    z = mset.real_values()
    x = np.concatenate([v.real, v.imag])

    def residual(x):
        return whiten(z - evaluate_real(plan, x[:n] + 1j * x[n:]))

    r = residual(x)
    cost = float(r @ r)
    trace = [cost]
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        J = whiten(real_jacobian(plan, x[:n] + 1j * x[n:]))[:, free]
        s = np.linalg.svd(J, compute_uv=False)
        if J.shape[0] < J.shape[1] or s[-1] <= 1e-12 * s[0]:
            raise UnobservableError(f"unobservable/ill-conditioned at iterate {it}")
        dx, *_ = np.linalg.lstsq(J, r, rcond=None)
        slope = -2.0 * float((J.T @ r) @ dx)
        step = opts.step0
        while True:
            xn = x.copy()
            xn[free] += step * dx
            rn = residual(xn)
            cn = float(rn @ rn)
            if cn <= cost + opts.armijo * step * slope or step < 1e-10:
                break
            step *= opts.shrink
        if cn > cost:
            converged = np.linalg.norm(dx) * step < np.sqrt(opts.tol)
            break
        x, r, cost = xn, rn, cn
        trace.append(cost)
        if np.linalg.norm(step * dx) < opts.tol or cost == 0.0:
            converged = True
            break
        if len(trace) > 2 and abs(trace[-2] - cost) <= 1e-15 * max(cost, 1.0) and np.linalg.norm(step * dx) < 1e-7:
            converged = True
            break
    v = x[:n] + 1j * x[n:]
    if not converged:
        log.info("gauss_newton stopped after %d iterations without meeting tol", it)
    return _finish(mset, v, trace, it, converged, "gn")


def stationarity(mset: MeasurementSet, v) -> float:
    """Norm of ``J^T Sigma^-1 r`` over the free coordinates (normal-equation residual)."""
    plan = mset.plan
    n = plan.n_bus
    whiten = _whitener(plan)
    J = whiten(real_jacobian(plan, v))
    r = whiten(mset.real_values() - evaluate_real(plan, v))
    g = J.T @ r
    if not plan.has_pmu:
        g = np.delete(g, n + _ref(plan))
    return float(np.linalg.norm(g))


# -- relaxations ---------------------------------------------------------------

def _pad(x: np.ndarray, extra: int) -> np.ndarray:
    return np.vstack([x, np.zeros((extra, x.shape[1]), dtype=complex)]) if extra else x


def _scada_rows(plan: MeasurementPlan, pad: int = 0, transform: np.ndarray | None = None):
    """RowSet for the quadratic entries; ``transform`` maps the lifted variable (``v = T x``)."""
    pairs = []
    for e in plan.entries:
        if e.is_linear:
            continue
        a, b = e.a, e.b
        if transform is not None:
            a, b = transform.conj().T @ a, transform.conj().T @ b
        pairs.append((_pad(a, pad), _pad(b, pad)))
    n = (plan.n_bus if transform is None else transform.shape[1]) + pad
    return RowSet.from_pairs(n, pairs)


def _linear_block(Phi: np.ndarray, zeta: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Joint-block cost matrix of ``sum_i w_i |zeta_i - Phi_i v|^2``."""
    n = Phi.shape[1]
    Pw = Phi.conj().T * weights
    C = np.zeros((n + 1, n + 1), dtype=complex)
    C[:n, :n] = Pw @ Phi
    C[:n, n] = -Pw @ zeta
    C[n, :n] = C[:n, n].conj()
    C[n, n] = np.sum(weights * np.abs(zeta) ** 2)
    return C


def _joint_eq(n: int) -> RowSet:
    e = np.zeros(n + 1, dtype=complex)
    e[n] = 1.0
    return RowSet.from_pairs(n + 1, [(e, e)])


def _top_eigs(V: np.ndarray) -> tuple:
    lam = np.linalg.eigvalsh(V)
    return float(lam[-1]), float(lam[-2]) if len(lam) > 1 else 0.0


def _quad_weights(mset: MeasurementSet) -> tuple[MeasurementSet, np.ndarray]:
    """(set with uncorrelated noise, per-entry weights)."""
    if mset.plan.cov is not None:
        w = prewhiten(mset)
        return w, np.ones(w.plan.size)
    return mset, 1.0 / mset.plan.sigmas ** 2


def _joint_to_state(W: np.ndarray) -> np.ndarray:
    lam, U = np.linalg.eigh(W)
    u = U[:, -1]
    return u[:-1] / u[-1]


def sdr_solve(mset: MeasurementSet, opts: SolverOptions | None = None, recover: str = "eig") -> StateEstimate:
    """Semidefinite relaxation of the WLS problem.

    SCADA-only sets use ``V`` directly; with PMU entries the variable is the
    joint block ``[[V, v], [v^H, 1]]`` and PMU terms enter linearly.
    """
    opts = opts or SolverOptions()
    src = mset
    mset, w = _quad_weights(mset)
    plan = mset.plan
    n = plan.n_bus
    quad = ~plan.linear_mask
    z = mset.z.real[quad]
    if not plan.has_pmu:
        prob = SDPProblem(n, _scada_rows(plan), z, w[quad])
        res = require(solve_sdp(prob, gap_tol=opts.gap_tol, rel_gap=opts.rel_gap), "sdr_solve")
        V = res.W
        v = rank1_recover(V, recover, seed=opts.seed, mset=src, ref_index=_ref(plan), n_samples=opts.n_samples)
    else:
        lin = plan.linear_mask
        Phi = np.array([e.phi for e in plan.entries if e.is_linear])
        C = _linear_block(Phi, mset.z[lin], w[lin])
        prob = SDPProblem(n + 1, _scada_rows(plan, pad=1), z, w[quad], C=C, eq=_joint_eq(n), e=[1.0])
        res = require(solve_sdp(prob, gap_tol=opts.gap_tol, rel_gap=opts.rel_gap), "sdr_solve")
        V = res.W[:n, :n]
        v = _joint_to_state(res.W)
    return _finish(src, v, [h["objective"] for h in res.history], res.iterations, res.converged, "sdr",
                   V_hat=V, top_eigs=_top_eigs(V), relaxed_cost=res.objective,
                   diagnostics={"gap": res.gap})


def sdr_cost(mset: MeasurementSet, V: np.ndarray) -> float:
    """Relaxed WLS cost ``sum_m w_m (z_m - tr(H_m V))^2`` (SCADA entries)."""
    mset, w = _quad_weights(mset)
    quad = ~mset.plan.linear_mask
    vals = _scada_rows(mset.plan).values(V)
    return float(np.sum(w[quad] * (mset.z.real[quad] - vals) ** 2))


def sdr_cost_gradient(mset: MeasurementSet, V: np.ndarray) -> np.ndarray:
    mset, w = _quad_weights(mset)
    quad = ~mset.plan.linear_mask
    prob = SDPProblem(mset.plan.n_bus, _scada_rows(mset.plan), mset.z.real[quad], w[quad])
    return prob.gradient(V)


def rank1_recover(V_hat: np.ndarray, method: str = "eig", seed=None, mset: MeasurementSet | None = None,
                  ref_index: int = 0, n_samples: int = 100) -> np.ndarray:
    """Rank-one state from a lifted PSD estimate.

    ``eig``: scaled principal eigenvector (ties broken by the largest
    reference-bus entry).  ``randomization``: Gaussian draws with covariance
    ``V_hat``, each optimally rescaled, keeping the lowest WLS cost.
    """
    V = 0.5 * (V_hat + V_hat.conj().T)
    lam, U = np.linalg.eigh(V)
    if lam[0] < -1e-9 * max(1.0, abs(lam[-1])):
        raise ValueError("V_hat is not positive semidefinite")
    if method == "eig":
        top = lam[-1]
        cands = np.flatnonzero(top - lam < TIE_TOL)
        k = cands[np.argmax(np.abs(U[ref_index, cands]))] if len(cands) > 1 else len(lam) - 1
        v = np.sqrt(max(top, 0.0)) * U[:, k]
        return align_phase(v, ref_index)
    if method != "randomization":
        raise ValueError(f"unknown recovery method {method!r}")
    if mset is None:
        raise ValueError("randomization needs the measurement set to score samples")
    rng = np.random.default_rng(seed)
    L = U * np.sqrt(np.clip(lam, 0.0, None))
    n = len(lam)
    best, best_cost = None, np.inf
    plan = mset.plan
    quad = ~plan.linear_mask
    w = 1.0 / plan.sigmas[quad] ** 2
    zq = mset.z.real[quad]
    for _ in range(n_samples):
        xi = L @ ((rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2))
        q = evaluate(plan, xi).real[quad]
        denom = float(np.sum(w * q * q))
        alpha = max(float(np.sum(w * zq * q)) / denom, 0.0) if denom > 0 else 0.0
        cand = align_phase(np.sqrt(alpha) * xi, ref_index)
        c = wls_cost(mset, cand)
        if c < best_cost:
            best, best_cost = cand, c
    return best


def penalized_sdr(mset: MeasurementSet, H0: np.ndarray, mu: float, loss: str = "LS",
                  opts: SolverOptions | None = None) -> StateEstimate:
    """``min tr(H0 V) + mu * sum_m f(r_m / sigma_m)`` over ``V`` PSD, ``f`` squared or absolute."""
    opts = opts or SolverOptions()
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if loss not in ("LS", "LAV"):
        raise ValueError("loss must be 'LS' or 'LAV'")
    plan = mset.plan
    if plan.has_pmu or plan.cov is not None:
        raise CaseError("penalized relaxation takes SCADA-only sets with diagonal noise")
    n = plan.n_bus
    H0 = np.asarray(H0, dtype=complex)
    if mu == 0:
        # tr(H0 V) >= 0 on the PSD cone and V = 0 attains it
        V = np.zeros((n, n), dtype=complex)
        return _finish(mset, np.zeros(n, dtype=complex), [0.0], 0, True, "psdr-" + loss.lower(),
                       V_hat=V, top_eigs=(0.0, 0.0), relaxed_cost=0.0)
    rows = _scada_rows(plan)
    sig = plan.sigmas
    z = mset.z.real
    if loss == "LS":
        prob = SDPProblem(n, rows, z, mu / sig ** 2, C=H0)
    else:
        prob = SDPProblem(n, RowSet.empty(n), np.zeros(0), np.zeros(0), C=H0, lav=rows, g=z, mu=mu / sig)
    res = require(solve_sdp(prob, gap_tol=opts.gap_tol, rel_gap=opts.rel_gap), "penalized_sdr")
    v = rank1_recover(res.W, "eig", ref_index=_ref(plan))
    return _finish(mset, v, [h["objective"] for h in res.history], res.iterations, res.converged,
                   "psdr-" + loss.lower(), V_hat=res.W, top_eigs=_top_eigs(res.W), relaxed_cost=res.objective,
                   diagnostics={"gap": res.gap})


# -- feasible point pursuit ----------------------------------------------------

def split_psd_parts(e, tol: float = EIG_SPLIT_TOL):
    """Real factors ``P``, ``N`` (``2N x k``) with ``v^H H+ v = |P^T x|^2`` and ``v^H H- v = -|N^T x|^2``.

    ``x = [Re v; Im v]``.  Eigenvalues in ``[-tol, tol]`` go to the positive part.
    """
    basis = np.hstack([e.a, e.b])
    Q, R = np.linalg.qr(basis)
    keep = np.abs(np.diag(R)) > 1e-14 * max(1.0, np.abs(R).max())
    if not np.all(keep):
        Q, R = np.linalg.qr(basis[:, _independent_columns(basis)])
    Ra = Q.conj().T @ e.a
    Rb = Q.conj().T @ e.b
    S = 0.5 * (Ra @ Rb.conj().T + Rb @ Ra.conj().T)
    lam, Us = np.linalg.eigh(S)
    vecs = Q @ Us
    pos, neg = [], []
    for l, p in zip(lam, vecs.T):
        u1 = np.concatenate([p.real, p.imag])
        u2 = np.concatenate([-p.imag, p.real])
        if l >= -tol:
            if l > 0:
                pos += [np.sqrt(l) * u1, np.sqrt(l) * u2]
        else:
            neg += [np.sqrt(-l) * u1, np.sqrt(-l) * u2]
    n2 = 2 * e.n
    P = np.array(pos).T if pos else np.zeros((n2, 0))
    N = np.array(neg).T if neg else np.zeros((n2, 0))
    return P, N


def _independent_columns(X: np.ndarray) -> list:
    cols = []
    for j in range(X.shape[1]):
        trial = X[:, cols + [j]]
        if np.linalg.matrix_rank(trial, tol=1e-12) == len(cols) + 1:
            cols.append(j)
    return cols


class _Factors:
    """Stacked positive/negative factors of all quadratic entries.

    ``SP``/``SN`` are 0/1 matrices summing factor columns into entries.
    ``keep`` selects the real coordinates that remain free.
    """

    def __init__(self, plan: MeasurementPlan, keep: np.ndarray):
        Ps, Ns, op, on = [], [], [], []
        quad = [i for i, e in enumerate(plan.entries) if not e.is_linear]
        for m, i in enumerate(quad):
            P, N = split_psd_parts(plan.entries[i])
            Ps.append(P)
            Ns.append(N)
            op += [m] * P.shape[1]
            on += [m] * N.shape[1]
        n2 = 2 * plan.n_bus
        self.M = len(quad)
        self.P = (np.hstack(Ps) if Ps else np.zeros((n2, 0)))[keep]
        self.N = (np.hstack(Ns) if Ns else np.zeros((n2, 0)))[keep]
        self.SP = np.zeros((len(op), self.M))
        self.SP[np.arange(len(op)), op] = 1.0
        self.SN = np.zeros((len(on), self.M))
        self.SN[np.arange(len(on)), on] = 1.0


def _first_exit(c: np.ndarray, b: np.ndarray, a: np.ndarray) -> float:
    """Smallest ``s > 0`` with ``c + b s + a s^2 = 0`` given ``c < 0``, ``a >= 0``."""
    s = np.full(len(c), np.inf)
    quad = a > 0
    disc = np.sqrt(np.maximum(b[quad] ** 2 - 4 * a[quad] * c[quad], 0.0))
    with np.errstate(divide="ignore"):
        s[quad] = 2 * (-c[quad]) / (b[quad] + disc)  # stable form of (-b + disc) / 2a
    lin = ~quad & (b > 0)
    s[lin] = -c[lin] / b[lin]
    return float(s.min()) if len(s) else np.inf


def _fpp_inner(fac: _Factors, x_i: np.ndarray, z: np.ndarray, Winv: np.ndarray, lin_Q: np.ndarray,
               lin_c: np.ndarray, chi0: np.ndarray, tol: float):
    """Barrier Newton for one convex restriction over ``(x, chi)``.

    Constraints per entry ``m``::

        |P^T x|^2 - 2 (N^T x_i)^T N^T x + |N^T x_i|^2 - z - chi <= 0
        |N^T x|^2 - 2 (P^T x_i)^T P^T x + |P^T x_i|^2 + z - chi <= 0

    Adding the two gives ``chi >= 0``, so no separate sign constraint is
    needed.  Objective: ``chi^T Winv chi + x^T lin_Q x - 2 lin_c^T x``.
    Both constraint functions are exact quadratics along any direction, so
    the line search computes the feasible step length in closed form.
    """
    P, N, SP, SN = fac.P, fac.N, fac.SP, fac.SN
    M = fac.M
    n2 = len(x_i)
    Pxi, Nxi = P.T @ x_i, N.T @ x_i
    kP, kN = (Pxi ** 2) @ SP, (Nxi ** 2) @ SN
    lin_g1 = -2 * (N * Nxi) @ SN
    lin_g2 = -2 * (P * Pxi) @ SP

    x, chi = x_i.copy(), chi0.copy()
    w_diag = np.diag(Winv).copy() if np.count_nonzero(Winv - np.diag(np.diag(Winv))) == 0 else None

    def state(x, chi):
        Px, Nx = P.T @ x, N.T @ x
        c1 = (Px ** 2) @ SP + lin_g1.T @ x + kN - z - chi
        c2 = (Nx ** 2) @ SN + lin_g2.T @ x + kP + z - chi
        return c1, c2, Px, Nx

    def f0(x, chi):
        return float(chi @ Winv @ chi + x @ lin_Q @ x - 2 * lin_c @ x)

    nu = 2.0 * M
    t = max(nu / max(f0(x, chi), 1e-12), 1e-6)
    dim = n2 + M
    newton = 0
    for _ in range(80):
        # intermediate barrier stages only need rough centering
        cen = 1e-9 if nu / t <= tol else 1e-3
        for _ in range(100):
            newton += 1
            c1, c2, Px, Nx = state(x, chi)
            d1, d2 = -1.0 / c1, -1.0 / c2
            g1 = 2 * (P * Px) @ SP + lin_g1
            g2 = 2 * (N * Nx) @ SN + lin_g2
            grad = np.empty(dim)
            grad[:n2] = t * (2 * lin_Q @ x - 2 * lin_c) + g1 @ d1 + g2 @ d2
            grad[n2:] = t * 2 * Winv @ chi - d1 - d2
            Hxx = (t * 2 * lin_Q + (g1 * d1 ** 2) @ g1.T + (g2 * d2 ** 2) @ g2.T
                   + 2 * (P * (SP @ d1)) @ P.T + 2 * (N * (SN @ d2)) @ N.T)
            cross = -(g1 * d1 ** 2) - (g2 * d2 ** 2)
            slack = d1 ** 2 + d2 ** 2
            if w_diag is not None:
                # slack block is diagonal: eliminate chi and factor the state block only
                Dinv = 1.0 / (t * 2 * w_diag + slack)
                Sx = Hxx - (cross * Dinv) @ cross.T
                rx = grad[:n2] - cross @ (Dinv * grad[n2:])
                try:
                    dx = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(Sx, check_finite=False), rx)
                except np.linalg.LinAlgError:
                    dx = -np.linalg.lstsq(Sx, rx, rcond=None)[0]
                step_dir = np.concatenate([dx, -Dinv * (grad[n2:] + cross.T @ dx)])
            else:
                Hs = np.empty((dim, dim))
                Hs[:n2, :n2] = Hxx
                Hs[n2:, n2:] = t * 2 * Winv
                Hs[n2:, n2:][np.diag_indices(M)] += slack
                Hs[:n2, n2:] = cross
                Hs[n2:, :n2] = cross.T
                try:
                    step_dir = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(Hs, check_finite=False), grad)
                except np.linalg.LinAlgError:
                    step_dir = -np.linalg.lstsq(Hs, grad, rcond=None)[0]
            dec = -float(grad @ step_dir)
            if dec / 2 <= cen:
                break
            dx, dchi = step_dir[:n2], step_dir[n2:]
            Pd, Nd = P.T @ dx, N.T @ dx
            a1, b1 = (Pd ** 2) @ SP, g1.T @ dx - dchi
            a2, b2 = (Nd ** 2) @ SN, g2.T @ dx - dchi
            smax = min(_first_exit(c1, b1, a1), _first_exit(c2, b2, a2))
            f_lin = float(grad[:n2] @ dx) - float(g1 @ d1 @ dx + g2 @ d2 @ dx) + t * 2 * float(Winv @ chi @ dchi)
            f_quad = float(dchi @ Winv @ dchi + dx @ lin_Q @ dx)
            phi0 = t * f0(x, chi) - np.sum(np.log(-c1)) - np.sum(np.log(-c2))
            s = min(1.0, 0.99 * smax)
            while s > 1e-14:
                phi = (t * (f0(x, chi) + s * f_lin / t + s * s * f_quad)
                       - np.sum(np.log(-(c1 + s * b1 + s * s * a1))) - np.sum(np.log(-(c2 + s * b2 + s * s * a2))))
                if phi <= phi0 - 0.25 * s * dec:
                    # the closed-form step can round onto the boundary; confirm strict feasibility
                    c1n, c2n, _, _ = state(x + s * dx, chi + s * dchi)
                    if c1n.max() < 0 and c2n.max() < 0:
                        break
                s *= 0.5
            else:
                break
            x, chi = x + s * dx, chi + s * dchi
        if nu / t <= tol:
            break
        t = min(t * 100.0, nu / tol)
    return x, chi, newton


def fpp_solve(mset: MeasurementSet, v0=None, opts: SolverOptions | None = None) -> StateEstimate:
    """Feasible point pursuit from ``v0`` (flat profile by default).

    Without PMU entries the reference-bus imaginary coordinate stays pinned
    at zero inside every convex restriction.
    """
    opts = opts or SolverOptions()
    plan = mset.plan
    n = plan.n_bus
    ref = _ref(plan)
    v = np.ones(n, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    keep = np.arange(2 * n)
    if not plan.has_pmu:
        v = align_phase(v, ref)
        keep = np.delete(keep, n + ref)
    fac = _Factors(plan, keep)
    quad = ~plan.linear_mask
    z = mset.z.real[quad]
    Winv = np.linalg.inv(plan.cov) if plan.cov is not None else np.diag(1.0 / plan.sigmas[quad] ** 2)
    lin_Q = np.zeros((2 * n, 2 * n))
    lin_c = np.zeros(2 * n)
    for e, zz in zip(plan.entries, mset.z):
        if e.is_linear:
            R = np.vstack([np.concatenate([e.phi.real, -e.phi.imag]), np.concatenate([e.phi.imag, e.phi.real])])
            lin_Q += R.T @ R / e.sigma ** 2
            lin_c += R.T @ np.array([zz.real, zz.imag]) / e.sigma ** 2
    lin_Q, lin_c = lin_Q[np.ix_(keep, keep)], lin_c[keep]

    x = np.concatenate([v.real, v.imag])
    cost = wls_cost(mset, v)
    trace = [cost]
    converged = False
    newton = 0
    it = 0
    for it in range(1, opts.fpp_max_outer + 1):
        xr = x[keep]
        if fac.M == 0:
            xr_new = np.linalg.lstsq(lin_Q, lin_c, rcond=None)[0]
        else:
            hx = evaluate(plan, v).real[quad]
            chi0 = 1.1 * np.abs(hx - z) + 1e-3 * plan.sigmas[quad]
            xr_new, _, k = _fpp_inner(fac, xr, z, Winv, lin_Q, lin_c, chi0, max(1e-6 * cost, 1e-3 * opts.fpp_tol))
            newton += k
        xn = np.zeros(2 * n)
        xn[keep] = xr_new
        vn = xn[:n] + 1j * xn[n:]
        cn = wls_cost(mset, vn)
        if cn > cost:
            # the inexact inner solve can no longer improve the point
            converged = cn - cost <= 1e-6 * max(cost, 1e-12) or cost <= 1e-20
            break
        dx = float(np.linalg.norm(xn - x))
        x, v, cost = xn, vn, cn
        trace.append(cost)
        if fac.M == 0 or cost <= 1e-20 or trace[-2] - cost <= opts.fpp_tol * trace[-2] or dx < 1e-13:
            converged = True
            break
    return _finish(mset, v, trace, it, converged, "fpp", diagnostics={"newton_steps": newton})


# -- PMU / SCADA fusion --------------------------------------------------------

def fuse_pmu(v_s: np.ndarray, sigma_s: np.ndarray | None, pmu_set: MeasurementSet | None, mode: str = "MAP",
             scada_set: MeasurementSet | None = None, opts: SolverOptions | None = None) -> StateEstimate:
    """Combine a SCADA estimate (prior mean ``v_s``, covariance ``sigma_s``) with PMU readings.

    ``MAP``: closed-form complex linear estimate; PMU noise enters with its
    complex variance ``2 sigma^2``.  ``augmented_sdr``: SCADA quadratic rows
    plus PMU terms (and the prior, when ``sigma_s`` is given) in the joint
    block relaxation.
    """
    v_s = np.asarray(v_s, dtype=complex)
    n = len(v_s)
    if pmu_set is not None and pmu_set.plan.has_pmu:
        lin = pmu_set.plan.linear_mask
        Phi = np.array([e.phi for e in pmu_set.plan.entries if e.is_linear])
        zeta = pmu_set.z[lin]
        sig = pmu_set.plan.sigmas[lin]
    else:
        Phi, zeta, sig = np.zeros((0, n), complex), np.zeros(0, complex), np.zeros(0)
    if mode == "MAP":
        if sigma_s is None:
            raise CaseError("MAP fusion needs the prior covariance")
        S = np.asarray(sigma_s, dtype=complex)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise CaseError("prior covariance is not positive definite") from None
        Sinv = np.linalg.inv(S)
        Rinv = 1.0 / (2 * sig ** 2)
        A = Sinv + (Phi.conj().T * Rinv) @ Phi
        b = Sinv @ v_s + (Phi.conj().T * Rinv) @ zeta
        v = np.linalg.solve(A, b)
        r = zeta - Phi @ v
        cost = float(np.real((v - v_s).conj() @ Sinv @ (v - v_s)) + np.sum(Rinv * np.abs(r) ** 2))
        return StateEstimate(v, cost, [cost], r, 1, True, "map")
    if mode != "augmented_sdr":
        raise ValueError(f"unknown fusion mode {mode!r}")
    opts = opts or SolverOptions()
    C = _linear_block(Phi, zeta, 1.0 / sig ** 2) if len(sig) else np.zeros((n + 1, n + 1), complex)
    if sigma_s is not None:
        C = C + _prior_block(np.asarray(sigma_s), v_s)
    if scada_set is not None:
        sset, w = _quad_weights(scada_set)
        quad = ~sset.plan.linear_mask
        rows, y, ww = _scada_rows(sset.plan, pad=1), sset.z.real[quad], w[quad]
    else:
        rows, y, ww = RowSet.empty(n + 1), np.zeros(0), np.zeros(0)
    prob = SDPProblem(n + 1, rows, y, ww, C=C, eq=_joint_eq(n), e=[1.0])
    res = require(solve_sdp(prob, gap_tol=opts.gap_tol, rel_gap=opts.rel_gap), "fuse_pmu")
    v = _joint_to_state(res.W)
    V = res.W[:n, :n]
    return StateEstimate(v, res.objective, [h["objective"] for h in res.history], zeta - Phi @ v,
                         res.iterations, res.converged, "augmented_sdr", V_hat=V, top_eigs=_top_eigs(V),
                         relaxed_cost=res.objective)


def _prior_block(S: np.ndarray, v_s: np.ndarray) -> np.ndarray:
    n = len(v_s)
    P = np.linalg.inv(S)
    C = np.zeros((n + 1, n + 1), dtype=complex)
    C[:n, :n] = P
    C[:n, n] = -P @ v_s
    C[n, :n] = C[:n, n].conj()
    C[n, n] = np.real(v_s.conj() @ P @ v_s)
    return C


ESTIMATORS = {
    "gn": lambda mset, opts: gauss_newton(mset, None, opts),
    "sdr": lambda mset, opts: sdr_solve(mset, opts),
    "fpp": lambda mset, opts: fpp_solve(mset, None, opts),
}


def run_estimator(name: str, mset: MeasurementSet, opts: SolverOptions | None = None) -> StateEstimate:
    if name not in ESTIMATORS:
        raise CaseError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}")
    try:
        return ESTIMATORS[name](mset, opts or SolverOptions())
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"{name}: {exc}") from exc
