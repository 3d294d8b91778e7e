# modules/diagnostics.py
"""Independent checks of a solution: objective, residuals, comparison, reference OPF."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from modules.case_ingest import AdmittanceModel, in_service
from modules.models import (
    BusType,
    DrohsError,
    FeasibilityReport,
    IterationRecord,
    NetworkCase,
    ReferenceSolution,
    SolutionComparison,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnitCost:
    """Per-generator cost a g^2 + 2 b g + constant with g in per-unit."""
    a: np.ndarray
    b: np.ndarray
    constant: np.ndarray


def per_unit_costs(case: NetworkCase) -> UnitCost:
    """Convert raw file coefficients to the per-unit a g^2 + 2 b g form.

    A file cost c2 P^2 + c1 P + c0 with P in MW becomes, for g = P / baseMVA,
    a = c2 baseMVA^2 and b = c1 baseMVA / 2. This is the only place the factor
    of two on the linear term is applied.
    """
    base = case.baseMVA
    a = np.array([cost.a * base ** 2 for cost in case.costs])
    b = np.array([cost.b * base / 2 for cost in case.costs])
    c = np.array([cost.c for cost in case.costs])
    return UnitCost(a=a, b=b, constant=c)


def central_objective(g: Sequence[float], costs: UnitCost) -> float:
    g = np.asarray(g, dtype=float)
    return float(costs.a @ g ** 2 + 2 * costs.b @ g)


def _generator_incidence(case: NetworkCase) -> np.ndarray:
    index = case.bus_index()
    Cg = np.zeros((case.Nb, case.Ng))
    for m, gen in enumerate(case.gens):
        Cg[index[gen.bus], m] = 1.0
    return Cg


def feasibility_residuals(v: np.ndarray, g: np.ndarray, case: NetworkCase,
                          adm: AdmittanceModel) -> FeasibilityReport:
    """Constraint violations of (v, g) from complex power-flow arithmetic.

    v: complex bus voltages; g: complex generator outputs Pg + jQg, both per-unit.
    """
    v = np.asarray(v, dtype=complex)
    g = np.asarray(g, dtype=complex)

    # 1. Power balance.
    S_inj = v * np.conj(adm.Ybus @ v)
    Sd = np.array([bus.Pd + 1j * bus.Qd for bus in case.buses])
    mismatch = S_inj - (_generator_incidence(case) @ g - Sd)
    balance = np.maximum(np.abs(mismatch.real), np.abs(mismatch.imag))
    report = {
        "max_balance": float(balance.max()),
        "mean_balance": float(np.mean(np.r_[np.abs(mismatch.real), np.abs(mismatch.imag)])),
        "worst_balance_bus": case.buses[int(balance.argmax())].id,
    }

    # 2. Thermal limits at both ends.
    live = in_service(case)
    S_f = np.abs((adm.Cf @ v) * np.conj(adm.Yf @ v))
    S_t = np.abs((adm.Ct @ v) * np.conj(adm.Yt @ v))
    caps = np.array([br.rateA if br.limited else np.inf for br in live])
    flow = np.maximum(0.0, np.maximum(S_f, S_t) - caps) if len(live) else np.zeros(1)
    report["max_flow_violation"] = float(flow.max())
    report["worst_flow_branch"] = int(flow.argmax()) if flow.max() > 0 else None

    # 3. Generation boxes.
    if case.Ng:
        pmin = np.array([gen.Pmin for gen in case.gens])
        pmax = np.array([gen.Pmax for gen in case.gens])
        qmin = np.array([gen.Qmin for gen in case.gens])
        qmax = np.array([gen.Qmax for gen in case.gens])
        box = np.max(np.vstack([pmin - g.real, g.real - pmax, qmin - g.imag, g.imag - qmax,
                                np.zeros(case.Ng)]), axis=0)
        report["max_gen_violation"] = float(box.max())
        report["worst_gen"] = int(box.argmax()) if box.max() > 0 else None
    else:
        report["max_gen_violation"] = 0.0

    # 4. Voltage band.
    vm = np.abs(v)
    vmin = np.array([bus.Vmin for bus in case.buses])
    vmax = np.array([bus.Vmax for bus in case.buses])
    band = np.maximum(0.0, np.maximum(vmin - vm, vm - vmax))
    report["max_voltage_violation"] = float(band.max())
    report["worst_voltage_bus"] = case.buses[int(band.argmax())].id if band.max() > 0 else None
    return FeasibilityReport(**report)


def surrogate_and_lagrangian(x: List[np.ndarray], y: np.ndarray, z: List[np.ndarray], model,
                             u: Optional[Sequence[float]] = None) -> Tuple[float, float]:
    """(H, W) at (x, y, z) in $/h.

    W sums the exact nodal cost f_j plus the augmented penalty; H uses u_j, the
    cost part of the last SDP solve, in place of f_j (f_j where u is missing).
    Multipliers live in cost-scaled units, so the penalty is scaled back.
    """
    H = W = 0.0
    for j, node in enumerate(model.nodes):
        diff = x[j] - node.project_from_central(y)
        penalty = node.cost_scale * float(np.sum(node.rho / 2 * diff ** 2) + z[j] @ diff)
        f = node.objective(x[j])
        W += f + penalty
        H += (u[j] if u is not None else f) + penalty
    return H, W


def progress_measure(W_k: float, W_star: float) -> float:
    if W_star == 0:
        raise DrohsError("progress measure needs a nonzero reference value")
    return (W_k - W_star) / W_star


def eta_series(values: Sequence[float], W_star: float) -> List[Optional[float]]:
    if W_star == 0:
        return [None] * len(values)
    return [progress_measure(w, W_star) for w in values]


def phase_align_and_compare(v: np.ndarray, v_ref: np.ndarray, objective: Optional[float] = None,
                            objective_ref: Optional[float] = None) -> SolutionComparison:
    """Relative distance after the global rotation that best maps v onto v_ref."""
    v = np.asarray(v, dtype=complex)
    v_ref = np.asarray(v_ref, dtype=complex)
    if v.shape != v_ref.shape:
        raise DrohsError(f"voltage vectors differ in length ({v.size} vs {v_ref.size})")
    inner = np.vdot(v, v_ref)
    theta = float(np.angle(inner)) if abs(inner) > 0 else 0.0
    aligned = np.exp(1j * theta) * v
    deviation = np.abs(aligned - v_ref)
    norm = np.linalg.norm(v)
    distance = float(np.linalg.norm(aligned - v_ref) / norm) if norm > 0 else float(np.linalg.norm(v_ref))
    gap = None
    if objective is not None and objective_ref is not None:
        gap = abs(objective - objective_ref) / max(abs(objective_ref), 1.0)
    return SolutionComparison(distance=distance, rotation_deg=float(np.degrees(theta)), objective_gap=gap,
                              worst_bus=int(deviation.argmax()), worst_deviation=float(deviation.max()))


# --- Central reference OPF ---

def _power_and_jacobian(Y: np.ndarray, C: np.ndarray, vx: np.ndarray, vy: np.ndarray):
    """P, Q of u conj(I) with I = Y V and u = C V, plus their derivatives in (vx, vy)."""
    G, B = Y.real, Y.imag
    Ix = G @ vx - B @ vy
    Iy = B @ vx + G @ vy
    ux, uy = C @ vx, C @ vy
    P = ux * Ix + uy * Iy
    Q = uy * Ix - ux * Iy
    dP = np.hstack([Ix[:, None] * C + ux[:, None] * G + uy[:, None] * B,
                    Iy[:, None] * C - ux[:, None] * B + uy[:, None] * G])
    dQ = np.hstack([-Iy[:, None] * C + uy[:, None] * G - ux[:, None] * B,
                    Ix[:, None] * C - uy[:, None] * B - ux[:, None] * G])
    return P, Q, dP, dQ


def reference_opf(case: NetworkCase, adm: AdmittanceModel, max_iter: int = 1000) -> ReferenceSolution:
    """Central AC OPF in rectangular coordinates solved with SLSQP from a flat start."""
    nb, ng = case.Nb, case.Ng
    costs = per_unit_costs(case)
    scale = max(1.0, float(np.max(np.abs(np.r_[costs.a, costs.b]))) if ng else 1.0)
    Cg = _generator_incidence(case)
    I = np.eye(nb)
    Pd = np.array([bus.Pd for bus in case.buses])
    Qd = np.array([bus.Qd for bus in case.buses])
    vmin2 = np.array([bus.Vmin for bus in case.buses]) ** 2
    vmax2 = np.array([bus.Vmax for bus in case.buses]) ** 2
    ref = next((i for i, bus in enumerate(case.buses) if bus.bus_type == BusType.REF), 0)
    live = in_service(case)
    limited = np.array([l for l, br in enumerate(live) if br.limited], dtype=int)
    cap2 = np.array([live[l].rateA ** 2 for l in limited])
    Yf, Yt, Cf, Ct = adm.Yf[limited], adm.Yt[limited], adm.Cf[limited], adm.Ct[limited]

    split = lambda z: (z[:nb], z[nb:2 * nb], z[2 * nb:2 * nb + ng], z[2 * nb + ng:])

    def objective(z):
        _, _, pg, _ = split(z)
        return central_objective(pg, costs) / scale

    def objective_grad(z):
        _, _, pg, _ = split(z)
        grad = np.zeros_like(z)
        grad[2 * nb:2 * nb + ng] = (2 * costs.a * pg + 2 * costs.b) / scale
        return grad

    def balance(z):
        vx, vy, pg, qg = split(z)
        P, Q, _, _ = _power_and_jacobian(adm.Ybus, I, vx, vy)
        return np.r_[P - Cg @ pg + Pd, Q - Cg @ qg + Qd, vy[ref]]

    def balance_jac(z):
        vx, vy, _, _ = split(z)
        _, _, dP, dQ = _power_and_jacobian(adm.Ybus, I, vx, vy)
        gauge = np.zeros((1, z.size))
        gauge[0, nb + ref] = 1.0
        zeros = np.zeros((nb, ng))
        return np.vstack([np.hstack([dP, -Cg, zeros]), np.hstack([dQ, zeros, -Cg]), gauge])

    def limits(z):
        vx, vy, _, _ = split(z)
        E = vx ** 2 + vy ** 2
        parts = [E - vmin2, vmax2 - E]
        for Y, C in ((Yf, Cf), (Yt, Ct)):
            if len(limited):
                P, Q, _, _ = _power_and_jacobian(Y, C, vx, vy)
                parts.append(cap2 - P ** 2 - Q ** 2)
        return np.concatenate(parts)

    def limits_jac(z):
        vx, vy, _, _ = split(z)
        dE = np.hstack([2 * np.diag(vx), 2 * np.diag(vy)])
        rows = [dE, -dE]
        for Y, C in ((Yf, Cf), (Yt, Ct)):
            if len(limited):
                P, Q, dP, dQ = _power_and_jacobian(Y, C, vx, vy)
                rows.append(-2 * P[:, None] * dP - 2 * Q[:, None] * dQ)
        J = np.vstack(rows)
        return np.hstack([J, np.zeros((J.shape[0], 2 * ng))])

    pmin = np.array([gen.Pmin for gen in case.gens])
    pmax = np.array([gen.Pmax for gen in case.gens])
    qmin = np.array([gen.Qmin for gen in case.gens])
    qmax = np.array([gen.Qmax for gen in case.gens])
    z0 = np.r_[np.ones(nb), np.zeros(nb), (pmin + pmax) / 2, (qmin + qmax) / 2]
    bounds = [(None, None)] * (2 * nb) + list(zip(pmin, pmax)) + list(zip(qmin, qmax))

    res = minimize(objective, z0, jac=objective_grad, method="SLSQP", bounds=bounds,
                   constraints=[{"type": "eq", "fun": balance, "jac": balance_jac},
                                {"type": "ineq", "fun": limits, "jac": limits_jac}],
                   options={"maxiter": max_iter, "ftol": 1e-12, "disp": False})
    vx, vy, pg, qg = split(res.x)
    status = "Optimal" if res.success else f"Failed: {res.message}"
    if not res.success:
        logger.warning(f"Reference OPF for {case.name} did not converge: {res.message}")
    logger.info(f"Reference OPF for {case.name}: objective {central_objective(pg, costs):.4f}")
    return ReferenceSolution(case=case.name, status=status, voltages_re=vx.tolist(), voltages_im=vy.tolist(),
                             Pg=pg.tolist(), Qg=qg.tolist(), objective=central_objective(pg, costs),
                             constant_cost=float(costs.constant.sum()))


# --- Trace emission ---

def write_trace_row(path: Union[str, Path], record: IterationRecord, header: bool) -> None:
    """Append one iteration to the trace CSV (header only on the first row)."""
    frame = pd.DataFrame([record.model_dump()])
    frame.to_csv(path, mode="w" if header else "a", header=header, index=False, float_format="%.17g")


def trace_frame(trace: Sequence[IterationRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.model_dump() for record in trace])
