"""Star-network model: per-node low-rank bases, selectors and constraint matrices.

Every nodal quantity (injection, branch flow, squared magnitude) is a quadratic
form v^T M v of the real-stacked voltage v = (v_x; v_y). M has rank 4 for
injections and flows and rank 2 for magnitudes, so it factors as
M = Phi diag(signature) Phi^T with a thin Phi. A node then works with the
projections alpha = Phi^T v instead of the full voltage.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, eigh, null_space
from scipy.sparse import csr_matrix

from modules.case_ingest import AdmittanceModel, check_connectivity, in_service
from modules.diagnostics import UnitCost, per_unit_costs
from modules.models import EngineConfig, ModelBuildError, ModelReport, NetworkCase, NodeRankReport

logger = logging.getLogger(__name__)

RANK_CUTOFF = 1e-9
# Eigenvalues closer than this (relative) share one eigenspace.
_TIE_TOL = 1e-8
# Generator boxes narrower than this are widened inside the lifted subproblem.
_MIN_BOX = 1e-6
_BOX_HALF_WIDTH = 1e-4


class QuantityKind(str, Enum):
    P_INJ = "P_inj"
    Q_INJ = "Q_inj"
    P_FLOW = "P_flow"
    Q_FLOW = "Q_flow"
    VMAG = "Vmag"


EXPECTED_RANK = {
    QuantityKind.P_INJ: 4,
    QuantityKind.Q_INJ: 4,
    QuantityKind.P_FLOW: 4,
    QuantityKind.Q_FLOW: 4,
    QuantityKind.VMAG: 2,
}


# --- Quadratic forms ---

def symmetric_quadratic_matrix(adm: AdmittanceModel, kind: QuantityKind, j: int,
                               line: Optional[int] = None) -> np.ndarray:
    """Real symmetric M with v^T M v equal to the named quantity at bus index j."""
    nb = adm.Nb
    M = np.zeros((2 * nb, 2 * nb))
    if kind == QuantityKind.VMAG:
        M[j, j] = M[j + nb, j + nb] = 1.0
        return M

    if kind in (QuantityKind.P_INJ, QuantityKind.Q_INJ):
        row = adm.Ybus[j]
    else:
        if line is None:
            raise ModelBuildError("flow quantities need a line index")
        if adm.f[line] == j:
            row = adm.Yf[line]
        elif adm.t[line] == j:
            row = adm.Yt[line]
        else:
            raise ModelBuildError(f"line {line} is not incident to bus index {j}")

    # Current I = row . V split as Ix = ix^T v, Iy = iy^T v.
    ix = np.r_[row.real, -row.imag]
    iy = np.r_[row.imag, row.real]
    ex = np.zeros(2 * nb)
    ey = np.zeros(2 * nb)
    ex[j] = 1.0
    ey[j + nb] = 1.0
    if kind in (QuantityKind.P_INJ, QuantityKind.P_FLOW):
        A = np.outer(ex, ix) + np.outer(ey, iy)
    else:
        A = np.outer(ey, ix) - np.outer(ex, iy)
    return 0.5 * (A + A.T)


def numerical_rank(M: np.ndarray) -> int:
    support = np.flatnonzero(np.any(M != 0, axis=1))
    if support.size == 0:
        return 0
    lam = eigh(M[np.ix_(support, support)], eigvals_only=True)
    return int(np.sum(np.abs(lam) > RANK_CUTOFF * np.max(np.abs(lam))))


def _canonical_basis(Q: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of span(Q), independent of how eigh rotated it."""
    P = Q @ Q.T
    weights = np.round(np.linalg.norm(P, axis=0), 12)
    order = sorted(range(P.shape[0]), key=lambda k: (-weights[k], k))
    basis: List[np.ndarray] = []
    for k in order:
        v = P[:, k].copy()
        for u in basis:
            v -= (u @ v) * u
        n = np.linalg.norm(v)
        if n > 1e-6:
            basis.append(v / n)
        if len(basis) == Q.shape[1]:
            break
    B = np.column_stack(basis)
    for c in range(B.shape[1]):
        if B[np.argmax(np.abs(B[:, c])), c] < 0:
            B[:, c] = -B[:, c]
    return B


def low_rank_decompose(M: np.ndarray, expected_rank: int) -> Tuple[np.ndarray, np.ndarray]:
    """Phi, signature with Phi diag(signature) Phi^T = M.

    Columns are ordered by descending |lambda| (positive before negative on a
    tie) and scaled by sqrt(|lambda|). Only the nonzero rows of M enter the
    eigendecomposition.
    """
    support = np.flatnonzero(np.any(M != 0, axis=1))
    if support.size == 0:
        raise ModelBuildError(f"numerical rank 0, expected {expected_rank}")
    lam, U = eigh(M[np.ix_(support, support)])
    scale = np.max(np.abs(lam))
    keep = np.abs(lam) > RANK_CUTOFF * scale
    rank = int(keep.sum())
    if rank != expected_rank:
        raise ModelBuildError(f"numerical rank {rank}, expected {expected_rank}")
    lam, U = lam[keep], U[:, keep]
    order = sorted(range(rank), key=lambda i: (-abs(lam[i]), -lam[i]))
    lam, U = lam[order], U[:, order]

    # Regroup eigenvalues that coincide and fix a canonical basis per group.
    columns, values = [], []
    start = 0
    while start < rank:
        stop = start + 1
        while stop < rank and abs(lam[stop] - lam[start]) <= _TIE_TOL * scale:
            stop += 1
        group = lam[start:stop].mean()
        basis = _canonical_basis(U[:, start:stop])
        for c in range(basis.shape[1]):
            columns.append(basis[:, c])
            values.append(group)
        start = stop

    Phi = np.zeros((M.shape[0], rank))
    Phi[support] = np.column_stack(columns) * np.sqrt(np.abs(values))
    return Phi, np.sign(values)


# --- Nodal layout ---

@dataclass(frozen=True)
class NodalLayout:
    """Coordinate positions inside x_j and mu_j.

    x_j = (alpha[4], beta[4], gamma_1..gamma_nl [4 each], delta_1..delta_nl [4 each], omega[2])
    mu_j = (x_j, f[nl], fbar[nl], g_p[ng], g_q[ng], end)
    """
    nl: int
    ng: int

    @property
    def n_power(self) -> int:
        return 8 * self.nl + 8

    @property
    def n_x(self) -> int:
        return 8 * self.nl + 10

    @property
    def n_mu(self) -> int:
        return 10 * self.nl + 2 * self.ng + 11

    @property
    def alpha(self) -> slice:
        return slice(0, 4)

    @property
    def beta(self) -> slice:
        return slice(4, 8)

    def gamma(self, l: int) -> slice:
        return slice(8 + 4 * l, 12 + 4 * l)

    def delta(self, l: int) -> slice:
        return slice(8 + 4 * self.nl + 4 * l, 12 + 4 * self.nl + 4 * l)

    @property
    def omega(self) -> slice:
        return slice(self.n_power, self.n_x)

    def f(self, l: int) -> int:
        return self.n_x + l

    def fbar(self, l: int) -> int:
        return self.n_x + self.nl + l

    def gp(self, m: int) -> int:
        return self.n_x + 2 * self.nl + m

    def gq(self, m: int) -> int:
        return self.n_x + 2 * self.nl + self.ng + m

    @property
    def end(self) -> int:
        return self.n_mu - 1


@dataclass
class NodalBasis:
    node: int
    bus_id: int
    lines: List[int]
    gens: List[int]
    Phi_L: np.ndarray
    Phi_M: np.ndarray
    signature_L: np.ndarray
    support: np.ndarray
    layout: NodalLayout

    @property
    def nl(self) -> int:
        return self.layout.nl

    @property
    def ng(self) -> int:
        return self.layout.ng


@dataclass
class SelectorSet:
    """Column selectors into mu_j; every constraint and cost matrix is A K A^T for one of them."""
    A_ab: np.ndarray
    A_gd: List[np.ndarray]
    A_w: np.ndarray
    A_fl: List[np.ndarray]
    A_g: np.ndarray
    A_gm: List[np.ndarray]
    A_j: np.ndarray


@dataclass
class PiSet:
    Pi_S: np.ndarray
    Pi_Sbar: np.ndarray
    Pi_F: List[np.ndarray]
    Pi_Fbar: List[np.ndarray]
    Pi_FlowMax: List[np.ndarray]
    Pi_G: List[Tuple[np.ndarray, np.ndarray]]
    Pi_E: np.ndarray


@dataclass
class NodalQuantities:
    p: float
    q: float
    f: np.ndarray
    fbar: np.ndarray
    E: float


def _selector(n: int, columns: List[int]) -> np.ndarray:
    A = np.zeros((n, len(columns)))
    A[columns, np.arange(len(columns))] = 1.0
    return A


def build_selectors(layout: NodalLayout) -> SelectorSet:
    n = layout.n_mu
    span = lambda s: list(range(s.start, s.stop))
    return SelectorSet(
        A_ab=_selector(n, span(layout.alpha) + span(layout.beta)),
        A_gd=[_selector(n, span(layout.gamma(l)) + span(layout.delta(l))) for l in range(layout.nl)],
        A_w=_selector(n, span(layout.omega)),
        A_fl=[_selector(n, [layout.f(l), layout.fbar(l)]) for l in range(layout.nl)],
        A_g=_selector(n, [layout.gp(m) for m in range(layout.ng)]
                      + [layout.gq(m) for m in range(layout.ng)] + [layout.end]),
        A_gm=[_selector(n, [layout.gp(m), layout.gq(m), layout.end]) for m in range(layout.ng)],
        A_j=_selector(n, list(range(layout.n_x))),
    )


def _bilinear(n: int, i: int, k: int, weight: float) -> np.ndarray:
    """Symmetric matrix whose form is weight * mu_i * mu_k."""
    B = np.zeros((n, n))
    B[i, k] += weight / 2
    B[k, i] += weight / 2
    return B


def _form(A: np.ndarray, K: np.ndarray) -> np.ndarray:
    """A K A^T for a selector A and a small kernel K (a vector means a diagonal kernel)."""
    K = np.diag(K) if K.ndim == 1 else K
    return A @ K @ A.T


def _box_kernel(lo: float, hi: float, pos: int, size: int) -> np.ndarray:
    """Kernel of g^2 - (lo + hi) g over the coordinates (..., g at pos, ..., end)."""
    K = np.zeros((size, size))
    K[pos, pos] = 1.0
    K[pos, -1] = K[-1, pos] = -(lo + hi) / 2
    return K


def build_pis(layout: NodalLayout, basis: NodalBasis, selectors: SelectorSet,
              pbox: np.ndarray, qbox: np.ndarray) -> PiSet:
    n, end = layout.n_mu, layout.end
    sig = basis.signature_L
    A_ab = selectors.A_ab

    Pi_S = _form(A_ab[:, :4], sig[layout.alpha])
    Pi_Sbar = _form(A_ab[:, 4:], sig[layout.beta])
    for m in range(layout.ng):
        Pi_S -= _bilinear(n, layout.gp(m), end, 1.0)
        Pi_Sbar -= _bilinear(n, layout.gq(m), end, 1.0)

    Pi_F, Pi_Fbar = [], []
    for l, A in enumerate(selectors.A_gd):
        Pi_F.append(_form(A[:, :4], sig[layout.gamma(l)]) - _bilinear(n, layout.f(l), end, 1.0))
        Pi_Fbar.append(_form(A[:, 4:], sig[layout.delta(l)]) - _bilinear(n, layout.fbar(l), end, 1.0))
    Pi_FlowMax = [_form(A, np.ones(2)) for A in selectors.A_fl]

    Pi_G = [(_form(A, _box_kernel(*pbox[m], 0, 3)), _form(A, _box_kernel(*qbox[m], 1, 3)))
            for m, A in enumerate(selectors.A_gm)]

    return PiSet(Pi_S=Pi_S, Pi_Sbar=Pi_Sbar, Pi_F=Pi_F, Pi_Fbar=Pi_Fbar,
                 Pi_FlowMax=Pi_FlowMax, Pi_G=Pi_G, Pi_E=_form(selectors.A_w, np.ones(2)))


def cost_matrix(layout: NodalLayout, selectors: SelectorSet, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """M_ob with mu^T M_ob mu = sum_m a_m g_m^2 + 2 b_m g_m."""
    ng = layout.ng
    K = np.zeros((2 * ng + 1, 2 * ng + 1))
    K[np.arange(ng), np.arange(ng)] = a
    K[np.arange(ng), -1] = K[-1, np.arange(ng)] = b
    return _form(selectors.A_g, K)


def linear_row(n: int, end: int, r: np.ndarray) -> np.ndarray:
    """Symmetric matrix whose form is r^T mu[:len(r)] when mu_end = 1."""
    B = np.zeros((n, n))
    k = len(r)
    B[:k, end] += r / 2
    B[end, :k] += r / 2
    return B


# --- Nodal projections and quantities ---

def project_to_nodal(v: np.ndarray, basis: NodalBasis) -> np.ndarray:
    """x_j for a single voltage v feeding both channels."""
    return np.r_[basis.Phi_L.T @ v, basis.Phi_M.T @ v]


def evaluate_quantities(x: np.ndarray, basis: NodalBasis) -> NodalQuantities:
    layout, sig = basis.layout, basis.signature_L
    w = sig * x[:layout.n_power] ** 2
    f = np.array([w[layout.gamma(l)].sum() for l in range(layout.nl)])
    fbar = np.array([w[layout.delta(l)].sum() for l in range(layout.nl)])
    omega = x[layout.omega]
    return NodalQuantities(p=float(w[layout.alpha].sum()), q=float(w[layout.beta].sum()),
                           f=f, fbar=fbar, E=float(omega @ omega))


def nodal_dispatch(p_net: float, a: np.ndarray, b: np.ndarray,
                   pmin: np.ndarray, pmax: np.ndarray) -> np.ndarray:
    """Least-cost split of p_net over units with cost a g^2 + 2 b g.

    Equal incremental cost 2 a g + 2 b, clipped to each box, found by
    bisection. Outside the joint range the excess is shared equally so that
    the split always sums to p_net.
    """
    ng = len(a)
    if ng == 0:
        return np.zeros(0)
    if ng == 1:
        return np.array([p_net])
    lo_total, hi_total = pmin.sum(), pmax.sum()
    if p_net >= hi_total:
        return pmax + (p_net - hi_total) / ng
    if p_net <= lo_total:
        return pmin + (p_net - lo_total) / ng

    curvature = np.maximum(a, 1e-6 * max(1.0, np.max(a), np.max(np.abs(b))))
    split = lambda lam: np.clip((lam - 2 * b) / (2 * curvature), pmin, pmax)
    lo = np.min(2 * b + 2 * curvature * pmin)
    hi = np.max(2 * b + 2 * curvature * pmax)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if split(mid).sum() < p_net:
            lo = mid
        else:
            hi = mid
    g = split(0.5 * (lo + hi))
    # Residual goes to units strictly inside their box.
    free = (g > pmin) & (g < pmax)
    if free.any():
        g[free] += (p_net - g.sum()) / free.sum()
    return g


def reactive_split(q_net: float, qmin: np.ndarray, qmax: np.ndarray) -> np.ndarray:
    """Common fraction of each unit's reactive range."""
    if len(qmin) == 0:
        return np.zeros(0)
    width = qmax.sum() - qmin.sum()
    if width <= 0:
        return qmin + (q_net - qmin.sum()) / len(qmin)
    return qmin + (q_net - qmin.sum()) / width * (qmax - qmin)


@dataclass
class NodeModel:
    basis: NodalBasis
    selectors: SelectorSet
    pis: PiSet
    d: float
    dbar: float
    e_min: float
    e_max: float
    caps: List[Optional[float]]
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    pbox: np.ndarray
    qbox: np.ndarray
    cost_a: np.ndarray
    cost_b: np.ndarray
    M_ob: np.ndarray
    rho: np.ndarray
    offset: int
    coupling: np.ndarray
    null_basis: np.ndarray
    cost_scale: float = 1.0

    @property
    def layout(self) -> NodalLayout:
        return self.basis.layout

    def quantities(self, x: np.ndarray) -> NodalQuantities:
        return evaluate_quantities(x, self.basis)

    def dispatch(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        qty = self.quantities(x)
        pg = nodal_dispatch(qty.p + self.d, self.cost_a, self.cost_b, self.pmin, self.pmax)
        qg = reactive_split(qty.q + self.dbar, self.qmin, self.qmax)
        return pg, qg

    def objective(self, x: np.ndarray) -> float:
        """Exact nodal cost f_j at x_j in $/h."""
        if self.basis.ng == 0:
            return 0.0
        pg, _ = self.dispatch(x)
        return float(self.cost_a @ pg ** 2 + 2 * self.cost_b @ pg)

    def consistency_rows(self) -> np.ndarray:
        """Rows R with R x = 0 exactly when x = Phi_j^T y for some y with v_L = v_M at bus j.

        The null-space rows keep the power coordinates in the column space of
        Phi_L^T; the last two tie omega to the bus voltage read off alpha.
        """
        lay = self.layout
        null = self.null_basis.T
        rows = np.zeros((null.shape[0] + 2, lay.n_x))
        rows[:null.shape[0], :lay.n_power] = null
        for k in range(2):
            rows[null.shape[0] + k, lay.alpha] = -self.coupling[:, k]
            rows[null.shape[0] + k, lay.n_power + k] = 1.0
        return rows

    def project_from_central(self, y: np.ndarray) -> np.ndarray:
        """Phi_j^T y."""
        nb2 = self.basis.Phi_L.shape[0]
        nb = nb2 // 2
        j = self.basis.node
        return np.r_[self.basis.Phi_L.T @ y[:nb2], y[nb2 + j], y[nb2 + nb + j]]

    def lift_to_central(self, w: np.ndarray) -> np.ndarray:
        """Phi_j w as a vector of length 4Nb."""
        nb2 = self.basis.Phi_L.shape[0]
        nb = nb2 // 2
        j = self.basis.node
        out = np.zeros(2 * nb2)
        out[:nb2] = self.basis.Phi_L @ w[:self.layout.n_power]
        out[nb2 + j] = w[-2]
        out[nb2 + nb + j] = w[-1]
        return out


@dataclass
class StarModel:
    case: NetworkCase
    adm: AdmittanceModel
    nodes: List[NodeModel]
    Phi: csr_matrix
    d_rho: np.ndarray
    normal: np.ndarray
    normal_factor: Tuple[np.ndarray, bool]
    costs: UnitCost
    cost_scale: float = 1.0
    _sigma_min: Optional[float] = field(default=None, repr=False)

    @property
    def Nb(self) -> int:
        return self.adm.Nb

    @property
    def n_var_max(self) -> int:
        return max(node.layout.n_mu for node in self.nodes)

    @property
    def rho_max(self) -> float:
        return float(self.d_rho.max())

    @property
    def rho_min(self) -> float:
        return float(self.d_rho.min())

    @property
    def sigma_min(self) -> float:
        """Smallest singular value of Phi D_rho^{1/2}."""
        if self._sigma_min is None:
            self._sigma_min = float(np.sqrt(np.linalg.eigvalsh(self.normal)[0]))
        return self._sigma_min


def incident_lines(adm: AdmittanceModel, j: int) -> List[int]:
    return [l for l in range(adm.Nl) if adm.f[l] == j or adm.t[l] == j]


def _nodal_basis(adm: AdmittanceModel, j: int, bus_id: int, lines: List[int], gens: List[int]) -> NodalBasis:
    layout = NodalLayout(nl=len(lines), ng=len(gens))
    blocks, signs = [], []
    plan = [(QuantityKind.P_INJ, None), (QuantityKind.Q_INJ, None)]
    plan += [(QuantityKind.P_FLOW, l) for l in lines]
    plan += [(QuantityKind.Q_FLOW, l) for l in lines]
    for kind, line in plan:
        M = symmetric_quadratic_matrix(adm, kind, j, line)
        try:
            Phi, sig = low_rank_decompose(M, EXPECTED_RANK[kind])
        except ModelBuildError as e:
            where = f" on line {line}" if line is not None else ""
            raise ModelBuildError(f"{kind.value}{where}: {e}", node=bus_id)
        blocks.append(Phi)
        signs.append(sig)
    Phi_L = np.column_stack(blocks)
    nb = adm.Nb
    Phi_M = np.zeros((2 * nb, 2))
    Phi_M[j, 0] = Phi_M[j + nb, 1] = 1.0
    support = np.flatnonzero(np.any(Phi_L != 0, axis=1))
    return NodalBasis(node=j, bus_id=bus_id, lines=lines, gens=gens, Phi_L=Phi_L, Phi_M=Phi_M,
                      signature_L=np.concatenate(signs), support=support, layout=layout)


def _widen(lo: float, hi: float) -> Tuple[float, float]:
    if hi - lo < _MIN_BOX:
        mid = 0.5 * (lo + hi)
        return mid - _BOX_HALF_WIDTH, mid + _BOX_HALF_WIDTH
    return lo, hi


def cost_scale(case: NetworkCase, costs: UnitCost) -> float:
    """Marginal cost ($/h per unit) of the lossless economic dispatch of the total load.

    The lifted subproblems see costs divided by this. Falls back to 1 for cost-free cases.
    """
    if case.Ng == 0:
        return 1.0
    pmin = np.array([gen.Pmin for gen in case.gens])
    pmax = np.array([gen.Pmax for gen in case.gens])
    load = sum(bus.Pd for bus in case.buses)
    g = nodal_dispatch(load, costs.a, costs.b, pmin, pmax)
    marginal = 2 * costs.a * g + 2 * costs.b
    inside = (g > pmin + 1e-9) & (g < pmax - 1e-9)
    scale = float(marginal[inside].max() if inside.any() else np.abs(marginal).max())
    return scale if scale > 1e-9 else 1.0


def coupling_matrix(basis: NodalBasis) -> np.ndarray:
    """W (4 x 2) with W^T alpha = (v_jx, v_jy) for every alpha = Phi_S^T v.

    The injection range always contains e_jx and e_jy, so Phi_S W = [e_jx, e_jy] is exact.
    """
    Phi_S = basis.Phi_L[:, basis.layout.alpha]
    nb = Phi_S.shape[0] // 2
    E = np.zeros((2 * nb, 2))
    E[basis.node, 0] = E[basis.node + nb, 1] = 1.0
    W, *_ = np.linalg.lstsq(Phi_S, E, rcond=None)
    if np.linalg.norm(Phi_S @ W - E) > 1e-8:
        raise ModelBuildError("bus voltage is outside the injection range", node=basis.bus_id)
    return W


def _build_node(case: NetworkCase, adm: AdmittanceModel, costs: UnitCost,
                config: EngineConfig, j: int, scale: float = 1.0) -> NodeModel:
    bus = case.buses[j]
    lines = incident_lines(adm, j)
    if not lines:
        raise ModelBuildError("bus has no in-service branch", node=bus.id)
    gens = [m for m, gen in enumerate(case.gens) if gen.bus == bus.id]
    basis = _nodal_basis(adm, j, bus.id, lines, gens)
    layout = basis.layout
    selectors = build_selectors(layout)

    unit = [case.gens[m] for m in gens]
    pmin = np.array([g.Pmin for g in unit])
    pmax = np.array([g.Pmax for g in unit])
    qmin = np.array([g.Qmin for g in unit])
    qmax = np.array([g.Qmax for g in unit])
    pbox = np.array([_widen(g.Pmin, g.Pmax) for g in unit]).reshape(-1, 2)
    qbox = np.array([_widen(g.Qmin, g.Qmax) for g in unit]).reshape(-1, 2)
    pis = build_pis(layout, basis, selectors, pbox, qbox)

    cost_a = costs.a[gens] if gens else np.zeros(0)
    cost_b = costs.b[gens] if gens else np.zeros(0)
    M_ob = cost_matrix(layout, selectors, cost_a / scale, cost_b / scale)

    live = in_service(case)
    caps = [live[l].rateA if live[l].limited else None for l in lines]
    rho = np.r_[np.full(layout.n_power, config.rho_power), np.full(2, config.rho_voltage)]
    return NodeModel(
        basis=basis, selectors=selectors, pis=pis, d=bus.Pd, dbar=bus.Qd,
        e_min=bus.Vmin ** 2, e_max=bus.Vmax ** 2, caps=caps,
        pmin=pmin, pmax=pmax, qmin=qmin, qmax=qmax, pbox=pbox, qbox=qbox, cost_a=cost_a, cost_b=cost_b,
        M_ob=M_ob, rho=rho, offset=0, cost_scale=scale, coupling=coupling_matrix(basis),
        null_basis=null_space(basis.Phi_L[basis.support], rcond=RANK_CUTOFF),
    )


def build_star_model(case: NetworkCase, adm: AdmittanceModel, config: EngineConfig,
                     workers: int = 1) -> StarModel:
    check_connectivity(case)
    costs = per_unit_costs(case)
    scale = cost_scale(case, costs)
    nb = adm.Nb

    # 1. Per-node bases, selectors and constraint matrices.
    build = lambda j: _build_node(case, adm, costs, config, j, scale)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            nodes = list(pool.map(build, range(nb)))
    else:
        nodes = [build(j) for j in range(nb)]

    # 2. Global Phi (4Nb x sum |x_j|) and the penalty diagonal.
    offset = 0
    rows, cols, vals = [], [], []
    for node in nodes:
        node.offset = offset
        sup = node.basis.support
        block = node.basis.Phi_L[sup]
        r, c = np.nonzero(block)
        rows.append(sup[r])
        cols.append(offset + c)
        vals.append(block[r, c])
        j = node.basis.node
        rows.append(np.array([2 * nb + j, 3 * nb + j]))
        cols.append(offset + node.layout.n_power + np.arange(2))
        vals.append(np.ones(2))
        offset += node.layout.n_x
    Phi = csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                     shape=(4 * nb, offset))
    d_rho = np.concatenate([node.rho for node in nodes])

    # 3. Normal matrix Phi D_rho Phi^T, accumulated in node order.
    normal = np.zeros((4 * nb, 4 * nb))
    for node in nodes:
        sup = node.basis.support
        block = node.basis.Phi_L[sup]
        normal[np.ix_(sup, sup)] += config.rho_power * (block @ block.T)
    normal[2 * nb:, 2 * nb:] += config.rho_voltage * np.eye(2 * nb)
    try:
        factor = cho_factor(normal)
    except np.linalg.LinAlgError:
        raise ModelBuildError("central normal matrix is singular")

    logger.info(f"Built star model for {case.name}: Nb={nb}, |x|={offset}, "
                f"max |mu|={max(n.layout.n_mu for n in nodes)}, cost scale {scale:.4g}")
    return StarModel(case=case, adm=adm, nodes=nodes, Phi=Phi, d_rho=d_rho,
                     normal=normal, normal_factor=factor, costs=costs, cost_scale=scale)


def model_report(case: NetworkCase, adm: AdmittanceModel) -> ModelReport:
    """Per-node ranks, reconstruction residuals and cardinalities (no exceptions on rank failure)."""
    nodes = []
    for j, bus in enumerate(case.buses):
        lines = incident_lines(adm, j)
        ng = sum(1 for gen in case.gens if gen.bus == bus.id)
        plan = [(QuantityKind.P_INJ, None, "P_inj"), (QuantityKind.Q_INJ, None, "Q_inj"),
                (QuantityKind.VMAG, None, "Vmag")]
        for l in lines:
            plan += [(QuantityKind.P_FLOW, l, f"P_flow[{l}]"), (QuantityKind.Q_FLOW, l, f"Q_flow[{l}]")]
        ranks: Dict[str, int] = {}
        expected: Dict[str, int] = {}
        residual = 0.0
        for kind, line, label in plan:
            M = symmetric_quadratic_matrix(adm, kind, j, line)
            ranks[label] = numerical_rank(M)
            expected[label] = EXPECTED_RANK[kind]
            if ranks[label] == expected[label]:
                Phi, sig = low_rank_decompose(M, expected[label])
                err = np.linalg.norm(Phi @ np.diag(sig) @ Phi.T - M) / np.linalg.norm(M)
                residual = max(residual, float(err))
        layout = NodalLayout(nl=len(lines), ng=ng)
        nodes.append(NodeRankReport(bus=bus.id, nl=layout.nl, ng=ng, ranks=ranks, expected=expected,
                                    max_residual=residual, n_x=layout.n_x, n_mu=layout.n_mu))
    return ModelReport(case=case.name, Nb=case.Nb, nodes=nodes, ok=all(n.ok for n in nodes))
