"""Dense log-barrier Newton method for small Hermitian semidefinite programs.

Problem class (W is an ``n x n`` Hermitian matrix)::

    minimize   sum_r w_r (<A_r, W> - y_r)^2 + <C, W> + sum_m mu_m |<G_m, W> - g_m|
    subject to <E_k, W> = e_k,  W PSD

Every row matrix is given in dyadic form ``(A B^H + B A^H)/2`` through a
:class:`RowSet`, so inner products, the Newton-system Gram matrix and the
matrix combinations ``sum_r beta_r W A_r W`` never touch ``n x n`` row
matrices.  The absolute-value terms carry an epigraph variable ``u`` with
barrier ``-log(u^2 - s^2)``; ``u`` is minimized out in closed form so the
Newton step runs on ``W`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import SolverError


@dataclass
class RowSet:
    """Stacked dyads; dyad ``j`` belongs to row ``owner[j]``."""

    A: np.ndarray
    B: np.ndarray
    owner: np.ndarray
    n_rows: int

    @classmethod
    def empty(cls, n: int) -> "RowSet":
        return cls(np.zeros((n, 0), complex), np.zeros((n, 0), complex), np.zeros(0, int), 0)

    @classmethod
    def from_pairs(cls, n: int, pairs) -> "RowSet":
        """Rows from ``(a, b)`` pairs where ``a``, ``b`` are ``n`` or ``n x r`` arrays."""
        As, Bs, owner = [], [], []
        for r, (a, b) in enumerate(pairs):
            a = np.asarray(a, dtype=complex).reshape(n, -1)
            b = np.asarray(b, dtype=complex).reshape(n, -1)
            As.append(a)
            Bs.append(b)
            owner += [r] * a.shape[1]
        if not As:
            return cls.empty(n)
        return cls(np.hstack(As), np.hstack(Bs), np.array(owner, dtype=int), len(As))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def concat(self, other: "RowSet") -> "RowSet":
        return RowSet(np.hstack([self.A, other.A]), np.hstack([self.B, other.B]),
                      np.concatenate([self.owner, other.owner + self.n_rows]), self.n_rows + other.n_rows)

    def _aggregate(self, per_dyad: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_rows)
        np.add.at(out, self.owner, per_dyad)
        return out

    def values(self, W: np.ndarray) -> np.ndarray:
        """``<A_r, W> = Re tr(A_r W)`` for every row."""
        if self.n_rows == 0:
            return np.zeros(0)
        WA = W @ self.A
        return self._aggregate(np.real(np.sum(self.B.conj() * WA, axis=0)))

    def matrix(self, r: int) -> np.ndarray:
        sel = self.owner == r
        AB = self.A[:, sel] @ self.B[:, sel].conj().T
        return 0.5 * (AB + AB.conj().T)

    def combine(self, coef: np.ndarray, left: np.ndarray | None = None) -> np.ndarray:
        """``sum_r coef_r X A_r X`` with ``X = left`` (identity when ``None``)."""
        XA = self.A if left is None else left @ self.A
        XB = self.B if left is None else left @ self.B
        c = coef[self.owner]
        M = (XA * c) @ XB.conj().T
        return 0.5 * (M + M.conj().T)

    def gram(self, W: np.ndarray) -> np.ndarray:
        """``G_rs = <A_r, W A_s W>``."""
        WA = W @ self.A
        WB = W @ self.B
        Mba = self.B.conj().T @ WA
        Mbb = self.B.conj().T @ WB
        Maa = self.A.conj().T @ WA
        Gd = 0.5 * np.real(Mba * Mba.T + Mbb * Maa.T)
        S = np.zeros((self.n_rows, len(self.owner)))
        S[self.owner, np.arange(len(self.owner))] = 1.0
        return S @ Gd @ S.T


@dataclass
class SDPProblem:
    n: int
    ls: RowSet
    y: np.ndarray
    w: np.ndarray
    C: np.ndarray | None = None
    lav: RowSet | None = None
    g: np.ndarray | None = None
    mu: np.ndarray | None = None
    eq: RowSet | None = None
    e: np.ndarray | None = None
    const: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.lav is None:
            self.lav, self.g, self.mu = RowSet.empty(self.n), np.zeros(0), np.zeros(0)
        if self.eq is None:
            self.eq, self.e = RowSet.empty(self.n), np.zeros(0)
        self.g = np.asarray(self.g, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.e = np.asarray(self.e, dtype=float)
        self.rows = self.ls.concat(self.lav).concat(self.eq)
        self.n_ls, self.n_lav, self.n_eq = self.ls.n_rows, self.lav.n_rows, self.eq.n_rows

    @property
    def nu(self) -> float:
        """Barrier parameter (complexity) of the barrier: ``n`` + 2 per absolute-value term."""
        return float(self.n + 2 * self.n_lav)

    def split(self, vals):
        a, b = self.n_ls, self.n_ls + self.n_lav
        return vals[:a], vals[a:b], vals[b:]

    def objective(self, W: np.ndarray, vals: np.ndarray | None = None) -> float:
        """Original (unbarriered) objective."""
        if vals is None:
            vals = self.rows.values(W)
        s_ls, s_lav, _ = self.split(vals)
        f = float(np.sum(self.w * (s_ls - self.y) ** 2)) + self.const
        if self.C is not None:
            f += float(np.real(np.sum(self.C.conj() * W)))
        return f + float(np.sum(self.mu * np.abs(s_lav - self.g)))

    def gradient(self, W: np.ndarray) -> np.ndarray:
        """Gradient of the objective (subgradient for the absolute-value terms)."""
        s_ls, s_lav, _ = self.split(self.rows.values(W))
        coef = np.concatenate([2 * self.w * (s_ls - self.y), self.mu * np.sign(s_lav - self.g), np.zeros(self.n_eq)])
        G = self.rows.combine(coef)
        if self.C is not None:
            G = G + self.C
        return G


@dataclass
class SDPResult:
    W: np.ndarray
    objective: float
    gap: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _lav_terms(d: np.ndarray, tau: np.ndarray):
    """Value, first and second derivative of ``min_u tau*u - log(u^2 - d^2)``."""
    R = np.sqrt(1.0 + (tau * d) ** 2)
    val = 1.0 + R - np.log(2.0 * (1.0 + R) / tau ** 2)
    return val, tau ** 2 * d / (1.0 + R), tau ** 2 / (R * (1.0 + R))


def _barrier_value(prob: SDPProblem, t: float, vals: np.ndarray, W: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        return np.inf
    diag = np.real(np.diag(L))
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        return np.inf
    s_ls, s_lav, _ = prob.split(vals)
    f = t * float(np.sum(prob.w * (s_ls - prob.y) ** 2))
    if prob.C is not None:
        f += t * float(np.real(np.sum(prob.C.conj() * W)))
    if prob.n_lav:
        f += float(np.sum(_lav_terms(s_lav - prob.g, t * prob.mu)[0]))
    return f - 2.0 * float(np.sum(np.log(diag)))


def solve_sdp(prob: SDPProblem, W0: np.ndarray | None = None, gap_tol: float = 1e-9, rel_gap: float = 1e-7,
              max_outer: int = 60, max_newton: int = 80, growth: float = 10.0,
              newton_tol: float = 1e-10) -> SDPResult:
    """Barrier path following; ``t`` grows by ``growth`` per centering step.

    Stops once ``nu/t <= max(gap_tol, rel_gap*|objective|)``.  ``W0`` must be
    positive definite and satisfy the equality rows (identity by default).
    """
    n = prob.n
    W = np.eye(n, dtype=complex) if W0 is None else np.array(W0, dtype=complex)
    vals = prob.rows.values(W)
    f0 = prob.objective(W, vals)
    t = prob.nu / max(abs(f0), 1e-8)
    history = []
    total = 0
    for outer in range(max_outer):
        for _ in range(max_newton):
            total += 1
            s_ls, s_lav, s_eq = prob.split(vals)
            gam = np.concatenate([2 * t * prob.w * (s_ls - prob.y),
                                  np.zeros(prob.n_lav), np.zeros(prob.n_eq)])
            h = np.concatenate([2 * t * prob.w, np.ones(prob.n_lav), np.zeros(prob.n_eq)])
            if prob.n_lav:
                _, d1, d2 = _lav_terms(s_lav - prob.g, t * prob.mu)
                gam[prob.n_ls:prob.n_ls + prob.n_lav] = d1
                h[prob.n_ls:prob.n_ls + prob.n_lav] = d2
            WCW = None
            q = vals.copy()
            if prob.C is not None:
                WC = W @ prob.C
                WCW = WC @ W
                q -= t * prob.rows.values(WCW) if prob.rows.n_rows else 0.0
            G = prob.rows.gram(W)
            K = G.copy()
            rhs = q.copy()
            fin = np.arange(prob.rows.n_rows) < prob.n_ls + prob.n_lav
            K[fin, fin] += 1.0 / h[fin]
            rhs[fin] += gam[fin] / h[fin]
            rhs[~fin] -= prob.e - s_eq
            beta = _solve_psd(K, rhs)
            D = W - prob.rows.combine(beta, W)
            if WCW is not None:
                D = D - t * WCW
            D = 0.5 * (D + D.conj().T)
            AD = q - G @ beta
            # directional derivative of the barrier objective along D;
            # tr(W^-1 D) = n - t<C,W> - sum beta_r <A_r,W>
            slope = float(np.sum(gam[fin] * AD[fin])) - n + float(np.sum(beta * vals))
            if prob.C is not None:
                slope += t * float(np.real(np.sum(prob.C.conj() * (W + D))))
            dec = -slope
            if dec / 2 <= newton_tol * max(1.0, n):
                break
            phi = _barrier_value(prob, t, vals, W)
            step = 1.0
            while step > 1e-12:
                Wn = W + step * D
                vn = vals + step * AD
                phin = _barrier_value(prob, t, vn, Wn)
                if phin <= phi + 0.25 * step * slope:
                    break
                step *= 0.5
            else:
                break
            W, vals = 0.5 * (Wn + Wn.conj().T), prob.rows.values(Wn)
            if step == 1.0 and dec / 2 <= 1e-8:
                break
        f = prob.objective(W, vals)
        gap = prob.nu / t
        history.append({"t": t, "objective": f, "gap": gap})
        if gap <= max(gap_tol, rel_gap * abs(f)):
            return SDPResult(W, f, gap, total, True, history)
        t *= growth
    return SDPResult(W, prob.objective(W, vals), prob.nu / t, total, False, history)


def _solve_psd(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if K.size == 0:
        return np.zeros(0)
    K = 0.5 * (K + K.T)
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(K, check_finite=False), rhs, check_finite=False)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=1e-14)
        return sol


def require(result: SDPResult, what: str) -> SDPResult:
    if not np.all(np.isfinite(result.W)):
        raise SolverError(f"{what}: barrier iterations produced non-finite values",
                          {"gap": result.gap, "iterations": result.iterations})
    return result
