"""Per-node lifted subproblem, candidate extraction and step acceptance."""
import time
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from modules.models import CaseTag, SdpOptions, SdpStatus
from modules.network_tensor import StarModel, linear_row
from modules.sdp_core import SdpProblem, SdpSolution, leading_decomposition, solve

logger = logging.getLogger(__name__)

RANK1_TOL = 1e-9
# Proximal weight on f, fbar and the generations in the lifted objective.
AUX_WEIGHT = 1e-2
# Minimum |mu_end| of the leading eigenvector for a usable candidate.
END_GUARD = 0.1


@dataclass
class NodalSubproblem:
    node: int
    problem: SdpProblem
    end: int
    n_x: int
    c: np.ndarray
    offset: float
    cost: np.ndarray
    scale: float = 1.0


@dataclass
class NodeOutcome:
    node: int
    x_hat: np.ndarray
    tag: CaseTag
    status: SdpStatus
    zeta: Optional[np.ndarray]
    mu: Optional[np.ndarray]
    lam1: float
    lam2: float
    eps: float
    u: float
    h: float
    elapsed_ms: float


def lift_to_sdp(model: StarModel, j: int, y: np.ndarray, z: np.ndarray,
                rho: Optional[np.ndarray] = None) -> NodalSubproblem:
    """Lifted h_j at (y, z_j): cost + penalty in the objective, nodal constraints in Z.

    The objective is in cost-scaled units; multiply by `scale` for $/h.
    """
    node = model.nodes[j]
    lay, pis, sel = node.layout, node.pis, node.selectors
    n, end = lay.n_mu, lay.end
    rho = node.rho if rho is None else np.broadcast_to(np.asarray(rho, dtype=float), (lay.n_x,))
    c = node.project_from_central(y)

    # 1. Objective: M_ob + rho/2 ||x - c||^2 + z^T (x - c), with x = Z[x, end].
    C = node.M_ob + (sel.A_j * (rho / 2)) @ sel.A_j.T + linear_row(n, end, z - rho * c)
    offset = float(np.sum(rho / 2 * c ** 2) - z @ c)

    # 2. Light proximal weight on the auxiliary coordinates, centred at their values at c.
    qty = node.quantities(c)
    pg, qg = node.dispatch(c)
    centres = [(lay.f(l), qty.f[l]) for l in range(lay.nl)]
    centres += [(lay.fbar(l), qty.fbar[l]) for l in range(lay.nl)]
    centres += [(lay.gp(m), pg[m]) for m in range(lay.ng)]
    centres += [(lay.gq(m), qg[m]) for m in range(lay.ng)]
    for k, centre in centres:
        C[k, k] += AUX_WEIGHT / 2
        C[k, end] -= AUX_WEIGHT * centre / 2
        C[end, k] -= AUX_WEIGHT * centre / 2
        offset += AUX_WEIGHT / 2 * centre ** 2

    # 3. Equalities: power balance, flow definitions, local consistency, homogenization.
    E_end = np.zeros((n, n))
    E_end[end, end] = 1.0
    equalities = [(pis.Pi_S, -node.d), (pis.Pi_Sbar, -node.dbar)]
    equalities += [(F, 0.0) for F in pis.Pi_F]
    equalities += [(F, 0.0) for F in pis.Pi_Fbar]
    equalities += [(linear_row(n, end, r), 0.0) for r in node.consistency_rows()]
    equalities.append((E_end, 1.0))

    # 4. Inequalities: thermal caps, generation boxes, voltage band.
    inequalities = [(pis.Pi_FlowMax[l], cap ** 2) for l, cap in enumerate(node.caps) if cap is not None]
    for m, (Gp, Gq) in enumerate(pis.Pi_G):
        inequalities.append((Gp, -node.pbox[m, 0] * node.pbox[m, 1]))
        inequalities.append((Gq, -node.qbox[m, 0] * node.qbox[m, 1]))
    inequalities.append((pis.Pi_E, node.e_max))
    inequalities.append((-pis.Pi_E, -node.e_min))

    return NodalSubproblem(node=j, problem=SdpProblem(C=C, equalities=equalities, inequalities=inequalities),
                           end=end, n_x=lay.n_x, c=c, offset=offset, cost=node.M_ob, scale=node.cost_scale)


def candidate_and_epsilon(sol: SdpSolution, x: np.ndarray, tau: float) -> Tuple[Optional[np.ndarray], float, float, float]:
    """Rank-1 candidate mu (end coordinate normalized to 1), lambda_1, lambda_2 and eps_j.

    The spectrum is taken on the (x, end) block of Z. The auxiliary
    coordinates of mu are read from the end column. mu is None when the
    leading eigenpair cannot be normalized.
    """
    Z = sol.Z
    n_x = len(x)
    end = Z.shape[0] - 1
    keep = np.r_[np.arange(n_x), end]
    lam, U = leading_decomposition(Z[np.ix_(keep, keep)])
    lam1 = float(lam[0])
    lam2 = float(lam[1]) if len(lam) > 1 else 0.0
    lam2 = max(lam2, 0.0)

    Zxx = Z[:n_x, :n_x]
    nx = np.linalg.norm(x)
    eps = tau * (np.sqrt(nx ** 2 + np.linalg.norm(Zxx - np.outer(x, x), "fro")) - nx)

    if lam1 <= 0:
        return None, lam1, lam2, float(eps)
    lead = np.sqrt(lam1) * U[:, 0]
    if abs(lead[-1]) <= END_GUARD:
        return None, lam1, lam2, float(eps)
    mu = Z[:, end] / Z[end, end]
    mu[:n_x] = lead[:n_x] / lead[-1]
    mu[end] = 1.0
    return mu, lam1, lam2, float(eps)


def classify(lam1: float, lam2: float, eps: float, zeta: Optional[np.ndarray],
             x: np.ndarray) -> Tuple[np.ndarray, CaseTag]:
    if zeta is None or lam1 <= 0:
        return x, CaseTag.REJECTED
    if lam2 <= RANK1_TOL * lam1:
        return zeta, CaseTag.EXACT
    if lam2 <= 2 * lam1 * eps:
        return zeta, CaseTag.PROJECTED
    return x, CaseTag.REJECTED


def blend(x: np.ndarray, zeta_hat: np.ndarray, delta: float) -> np.ndarray:
    return x + delta * (zeta_hat - x)


def nodal_residuals(mu: np.ndarray, sub: NodalSubproblem) -> np.ndarray:
    """Equality residuals |mu^T A mu - b| followed by inequality violations max(0, mu^T B mu - c)."""
    eq = [abs(mu @ A @ mu - b) for A, b in sub.problem.equalities]
    ineq = [max(0.0, mu @ B @ mu - c) for B, c in sub.problem.inequalities]
    return np.array(eq + ineq)


def solve_node(model: StarModel, j: int, y: np.ndarray, z: np.ndarray, x: np.ndarray,
               delta: float, tau: float, opts: Optional[SdpOptions] = None) -> NodeOutcome:
    """Lift, solve, classify and blend one node."""
    started = time.perf_counter()
    node = model.nodes[j]
    sub = lift_to_sdp(model, j, y, z)
    sol = solve(sub.problem, opts)
    elapsed = (time.perf_counter() - started) * 1e3

    if sol.status != SdpStatus.OPTIMAL:
        logger.warning(f"Bus {node.basis.bus_id}: SDP {sol.status.value}, step rejected")
        u = node.objective(x)
        return NodeOutcome(node=j, x_hat=x.copy(), tag=CaseTag.REJECTED, status=sol.status, zeta=None, mu=None,
                           lam1=0.0, lam2=0.0, eps=0.0, u=u, h=u, elapsed_ms=elapsed)

    mu, lam1, lam2, eps = candidate_and_epsilon(sol, x, tau)
    zeta = mu[:sub.n_x] if mu is not None else None
    zeta_hat, tag = classify(lam1, lam2, eps, zeta, x)
    x_hat = x.copy() if tag == CaseTag.REJECTED else blend(x, zeta_hat, delta)
    logger.debug(f"Bus {node.basis.bus_id}: {tag.value} (lam2/lam1={lam2 / lam1 if lam1 > 0 else np.inf:.2e}, "
                 f"eps={eps:.2e}, {sol.iterations} IPM iterations)")
    u = sub.scale * float(np.sum(sub.cost * sol.Z))
    return NodeOutcome(node=j, x_hat=x_hat, tag=tag, status=sol.status, zeta=zeta, mu=mu,
                       lam1=lam1, lam2=lam2, eps=eps, u=u, h=sub.scale * (sol.objective + sub.offset),
                       elapsed_ms=elapsed)
