"""Dense primal-dual interior-point solver for small semidefinite programs.

    minimize    tr(C Z)
    subject to  tr(A_i Z) = b_i
                tr(B_l Z) <= c_l
                Z psd

Inequalities get a nonnegative slack each, so the iterate is the block
diagonal pair (Z, s). Search directions use Nesterov-Todd scaling and a
Mehrotra predictor-corrector; the Schur complement is dense and factored by
Cholesky. Problem data is normalized (cost by its Frobenius norm, each
constraint row by its norm) before the iteration and results are mapped back.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, eigh, solve_triangular, svd

from modules.models import SdpOptions, SdpStatus

logger = logging.getLogger(__name__)


@dataclass
class SdpProblem:
    C: np.ndarray
    equalities: List[Tuple[np.ndarray, float]]
    inequalities: List[Tuple[np.ndarray, float]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass
class SdpSolution:
    Z: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    status: SdpStatus
    gap: float
    objective: float
    dual_objective: float
    iterations: int
    slacks: np.ndarray
    S: Optional[np.ndarray] = None


def _max_step_psd(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha keeping X + alpha dX psd (X pd)."""
    L = cholesky(X, lower=True)
    Li = solve_triangular(L, np.eye(X.shape[0]), lower=True)
    M = Li @ dX @ Li.T
    lam_min = eigh(0.5 * (M + M.T), eigvals_only=True)[0]
    return np.inf if lam_min >= 0 else -1.0 / lam_min


def _max_step_lp(s: np.ndarray, ds: np.ndarray) -> float:
    neg = ds < 0
    if not neg.any():
        return np.inf
    return float(np.min(-s[neg] / ds[neg]))


def _unscaled_ok(rp, Rd, rds, pobj, dobj, comp, norms, b, cscale, opts) -> bool:
    """Stopping test on the residuals of the problem as given, before normalization."""
    b_orig = b * norms
    pinf = np.linalg.norm(rp * norms) / (1 + np.linalg.norm(b_orig))
    dinf = cscale * (np.linalg.norm(Rd) + np.linalg.norm(rds)) / (1 + cscale)
    gap = cscale * max(abs(pobj - dobj), comp) / (1 + cscale * (abs(pobj) + abs(dobj)))
    return pinf <= opts.feas_tol and dinf <= opts.feas_tol and gap <= opts.gap_tol


def _result(
problem, X, s, y, S, n_eq, norms, cscale, status, gap, it) -> SdpSolution:
    duals = cscale * y / norms
    rhs = np.array([v for _, v in problem.equalities] + [v for _, v in problem.inequalities], dtype=float)
    Z = 0.5 * (X + X.T)
    return SdpSolution(
        Z=Z, eq_duals=duals[:n_eq], ineq_duals=-duals[n_eq:], status=status, gap=gap,
        objective=float(np.sum(problem.C * Z)), dual_objective=float(rhs @ duals),
        iterations=it, slacks=s.copy(), S=cscale * S,
    )


def solve(problem: SdpProblem, opts: Optional[SdpOptions] = None) -> SdpSolution:
    opts = opts or SdpOptions()
    m = problem.m
    n_eq, n_in = len(problem.equalities), len(problem.inequalities)
    p = n_eq + n_in
    n_total = m + n_in

    # 1. Stack and normalize the data.
    A = np.array([M for M, _ in problem.equalities] + [M for M, _ in problem.inequalities],
                 dtype=float).reshape(p, m, m)
    b = np.array([v for _, v in problem.equalities] + [v for _, v in problem.inequalities], dtype=float)
    has_slack = np.r_[np.zeros(n_eq), np.ones(n_in)]
    norms = np.sqrt(np.sum(A ** 2, axis=(1, 2)) + has_slack)
    norms[norms == 0] = 1.0
    A = A / norms[:, None, None]
    b = b / norms
    sl = (has_slack / norms)[n_eq:]
    cscale = np.linalg.norm(problem.C)
    if cscale == 0:
        cscale = 1.0
    C = problem.C / cscale
    Aflat = A.reshape(p, m * m)

    # 2. Initial point.
    a_norms = np.sqrt(np.sum(A ** 2, axis=(1, 2)))
    xi = max(10.0, np.sqrt(m), m * np.max((1 + np.abs(b)) / (1 + a_norms))) if p else 10.0
    eta = max(10.0, np.sqrt(m), np.max(a_norms) if p else 0.0, np.linalg.norm(C))
    X = xi * np.eye(m)
    S = eta * np.eye(m)
    s = np.full(n_in, xi)
    ss = np.full(n_in, eta)
    y = np.zeros(p)
    I = np.eye(m)

    def primal_map(dX: np.ndarray, ds: np.ndarray) -> np.ndarray:
        out = Aflat @ dX.ravel()
        out[n_eq:] += sl * ds
        return out

    status, gap = SdpStatus.MAX_ITER, np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        # 3. Residuals and stopping tests.
        rp = b - primal_map(X, s)
        Rd = C - np.tensordot(y, A, axes=1) - S
        rds = -sl * y[n_eq:] - ss
        comp = np.sum(X * S) + s @ ss
        assert comp >= -1e-12, "complementarity must stay nonnegative"
        mu = comp / n_total
        pobj = float(np.sum(C * X))
        dobj = float(b @ y)
        pinf = np.linalg.norm(rp) / (1 + np.linalg.norm(b))
        dinf = (np.linalg.norm(Rd) + np.linalg.norm(rds)) / (1 + np.linalg.norm(C))
        gap = max(abs(pobj - dobj), comp) / (1 + abs(pobj) + abs(dobj))
        if pinf <= opts.feas_tol and dinf <= opts.feas_tol and gap <= opts.gap_tol \
                and _unscaled_ok(rp, Rd, rds, pobj, dobj, comp, norms, b, cscale, opts):
            status = SdpStatus.OPTIMAL
            break
        if dobj > opts.infeasible_bound:
            status = SdpStatus.INFEASIBLE
            break

        # 4. Nesterov-Todd scaling point: G^{-1} X G^{-T} = G^T S G = diag(lam).
        try:
            L = cholesky(X, lower=True)
            R = cholesky(S, lower=True)
        except LinAlgError:
            status = SdpStatus.NUMERICAL_FAILURE
            break
        _, lam, Vt = svd(R.T @ L)
        G = (L @ Vt.T) / np.sqrt(lam)
        Ginv = (np.sqrt(lam)[:, None] * Vt) @ solve_triangular(L, I, lower=True)
        W = G @ G.T
        w = s / ss

        # 5. Schur complement M_ij = tr(A_i W A_j W) plus the slack block.
        WAW = W @ A @ W
        M = Aflat @ WAW.reshape(p, -1).T
        M[n_eq:, n_eq:] += np.diag(sl ** 2 * w)
        try:
            factor = cho_factor(0.5 * (M + M.T))
        except LinAlgError:
            status = SdpStatus.NUMERICAL_FAILURE
            break
        WRdW = W @ Rd @ W

        def direction(Rc: np.ndarray, rc: np.ndarray):
            GRG = G @ Rc @ G.T
            rhs = rp - Aflat @ GRG.ravel() + Aflat @ WRdW.ravel()
            rhs[n_eq:] -= sl * (rc - w * rds)
            dy = cho_solve(factor, rhs)
            dS = Rd - np.tensordot(dy, A, axes=1)
            dX = GRG - W @ dS @ W
            dss = rds - sl * dy[n_eq:]
            ds = rc - w * dss
            return 0.5 * (dX + dX.T), ds, dy, 0.5 * (dS + dS.T), dss

        def steps(dX, ds, dS, dss, fraction):
            ap = min(1.0, fraction * min(_max_step_psd(X, dX), _max_step_lp(s, ds)))
            ad = min(1.0, fraction * min(_max_step_psd(S, dS), _max_step_lp(ss, dss)))
            return ap, ad

        # 6. Predictor.
        dX, ds, dy, dS, dss = direction(-np.diag(lam), -s)
        ap, ad = steps(dX, ds, dS, dss, 1.0)
        mu_aff = (np.sum((X + ap * dX) * (S + ad * dS)) + (s + ap * ds) @ (ss + ad * dss)) / n_total
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

        # 7. Corrector with the second-order term in the scaled space.
        dXt = Ginv @ dX @ Ginv.T
        dSt = G.T @ dS @ G
        T = sigma * mu * I - np.diag(lam ** 2) - 0.5 * (dXt @ dSt + dSt @ dXt)
        Rc = 2 * T / (lam[:, None] + lam[None, :])
        rc = (sigma * mu - s * ss - ds * dss) / ss
        dX, ds, dy, dS, dss = direction(Rc, rc)
        ap, ad = steps(dX, ds, dS, dss, opts.step_fraction)

        X = X + ap * dX
        s = s + ap * ds
        y = y + ad * dy
        S = S + ad * dS
        ss = ss + ad * dss
        X, S = 0.5 * (X + X.T), 0.5 * (S + S.T)

    if status != SdpStatus.OPTIMAL:
        logger.debug(f"SDP of size {m} stopped with {status.value} after {it} iterations (gap {gap:.2e})")
    return _result(problem, X, s, y, S, n_eq, norms, cscale, status, float(gap), it)


def leading_decomposition(Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Full spectrum of Z in descending order; each eigenvector's largest entry is positive."""
    lam, U = eigh(0.5 * (Z + Z.T))
    lam, U = lam[::-1], U[:, ::-1].copy()
    for c in range(U.shape[1]):
        if U[np.argmax(np.abs(U[:, c])), c] < 0:
            U[:, c] = -U[:, c]
    return lam, U
