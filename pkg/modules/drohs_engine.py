"""Distributed iteration over the star model.

Each iteration solves every node's lifted subproblem (in parallel), combines
the accepted nodal steps into the central voltage y by weighted least squares,
updates the multipliers, and projects every node back onto y.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_solve

from modules.case_ingest import AdmittanceModel, build_admittance
from modules.diagnostics import (
    central_objective,
    eta_series,
    feasibility_residuals,
    phase_align_and_compare,
    surrogate_and_lagrangian,
    write_trace_row,
)
from modules.models import (
    CaseTag,
    CommLedger,
    EngineConfig,
    EngineError,
    InvariantRecord,
    IterationRecord,
    NetworkCase,
    RunResult,
    RunStatus,
    SdpOptions,
    StartMode,
)
from modules.network_tensor import StarModel, build_star_model
from modules.nodal_solver import NodeOutcome, solve_node

logger = logging.getLogger(__name__)

# Scale of the random null-space multipliers drawn at start-up.
Z_INIT_SCALE = 1e-3
# Consecutive small changes of W needed to stop.
PATIENCE = 3


@dataclass
class NodeIterate:
    x: np.ndarray
    z: np.ndarray
    tau: float
    eps: float = 0.0
    last_case: Optional[CaseTag] = None
    zeta_hat: Optional[np.ndarray] = None


@dataclass
class CentralState:
    y: np.ndarray
    delta: float
    k: int
    tau_max: float


@dataclass
class IterationTrace:
    W0: float
    H0: Optional[float] = None
    rows: List[IterationRecord] = field(default_factory=list)

    @property
    def W(self) -> List[float]:
        return [self.W0] + [row.W for row in self.rows]


def _null_space_sample(node, rng: np.random.Generator) -> np.ndarray:
    """Random z with Phi_j z = 0; it pairs to zero with every locally consistent x_j."""
    N = node.null_basis
    z = np.zeros(node.layout.n_x)
    z[:node.layout.n_power] = N @ (Z_INIT_SCALE * rng.standard_normal(N.shape[1]))
    return z


def initialize(model: StarModel, config: EngineConfig) -> Tuple[List[NodeIterate], CentralState]:
    rng = np.random.default_rng(config.seed)
    nb = model.Nb
    if config.start == StartMode.COLD:
        y = rng.uniform(-1.0, 1.0, 4 * nb)
    elif config.start == StartMode.FLAT:
        v = np.r_[np.ones(nb), rng.uniform(-0.1, 0.1, nb)]
        y = np.r_[v, v]
    else:
        v = np.asarray(config.warm_voltage, dtype=float)
        if v.shape != (2 * nb,):
            raise EngineError(f"warm start vector has length {v.size}, expected {2 * nb}")
        y = np.r_[v, v]

    iterates = []
    for node in model.nodes:
        z = _null_space_sample(node, rng)
        iterates.append(NodeIterate(x=node.project_from_central(y), z=z, tau=config.tau0))
    logger.info(f"Initialized {nb} nodes ({config.start.value} start, seed {config.seed})")
    return iterates, CentralState(y=y, delta=config.delta0, k=0, tau_max=config.tau0)


def converged(trace: IterationTrace, config: EngineConfig) -> bool:
    """PATIENCE consecutive relative changes of W at or below tol."""
    W = trace.W
    if len(trace.rows) < PATIENCE:
        return False
    return all(abs(W[i] - W[i - 1]) / max(abs(W[i]), 1.0) <= config.tol
               for i in range(len(W) - PATIENCE, len(W)))


def termination_check(trace: IterationTrace, config: EngineConfig) -> bool:
    return len(trace.rows) >= config.max_iter or converged(trace, config)


@dataclass
class StepReport:
    iterates: List[NodeIterate]
    central: CentralState
    record: IterationRecord
    invariant: Optional[InvariantRecord]
    outcomes: List[NodeOutcome]


def _monitor(model: StarModel, k: int, x_old, x_new, y_old, y_new, z_old, z_new,
             outcomes: List[NodeOutcome], delta: float, tau: float,
             H: float, H_prev: Optional[float], C: float) -> InvariantRecord:
    dx = np.concatenate(x_new) - np.concatenate(x_old)
    dz = np.concatenate(z_new) - np.concatenate(z_old)
    z_all = np.concatenate(z_new)
    phi_z = np.linalg.norm(model.Phi @ z_all) / max(np.linalg.norm(z_all), 1e-300)
    consistency = max(np.linalg.norm(x - node.project_from_central(y_new))
                      for x, node in zip(x_new, model.nodes))
    orthogonality = abs(dz @ dx) / max(np.linalg.norm(dz) * np.linalg.norm(dx), 1e-300)

    # D^{1/2} dx must lie in the range of D^{1/2} Phi^T.
    root = np.sqrt(model.d_rho)
    w = root * dx
    proj = root * (model.Phi.T @ cho_solve(model.normal_factor, model.Phi @ (root * w)))
    range_residual = np.linalg.norm(w - proj) / max(np.linalg.norm(w), 1e-300)

    # Step bounds over the non-rejected nodes.
    reach = np.sqrt(sum(np.sum((out.zeta - x) ** 2) for out, x in zip(outcomes, x_old)
                        if out.tag != CaseTag.REJECTED))
    base = delta * (1 + tau) * reach
    step_slack = base * np.sqrt(model.rho_max / model.rho_min) - np.linalg.norm(dx)
    y_slack = base * np.sqrt(model.rho_max) / model.sigma_min - np.linalg.norm(y_new - y_old)
    z_slack = base * model.rho_max - np.linalg.norm(dz)
    violation = H_prev is not None and H > H_prev + C * tau
    return InvariantRecord(k=k, phi_z=float(phi_z), consistency=float(consistency),
                           orthogonality=float(orthogonality), range_residual=float(range_residual),
                           step_bound_slack=float(step_slack), y_bound_slack=float(y_slack),
                           z_bound_slack=float(z_slack), descent_violation=bool(violation))


def iterate_once(model: StarModel, iterates: List[NodeIterate], central: CentralState, config: EngineConfig,
                 pool: Optional[ThreadPoolExecutor] = None, opts: Optional[SdpOptions] = None,
                 H_prev: Optional[float] = None, descent_C: float = 0.0) -> StepReport:
    """Nodal solves, central update, multipliers and schedules for one bulk-synchronous round."""
    tau = central.tau_max
    y = central.y

    # 1. Nodal solves, results kept in node order.
    work = lambda j: solve_node(model, j, y, iterates[j].z, iterates[j].x, central.delta, tau, opts)
    if pool is not None:
        outcomes = list(pool.map(work, range(model.Nb)))
    else:
        outcomes = [work(j) for j in range(model.Nb)]

    # 2. Central update y = (Phi D Phi^T)^{-1} Phi D x_hat, summed in node order.
    rhs = np.zeros(4 * model.Nb)
    for node, out in zip(model.nodes, outcomes):
        rhs += node.lift_to_central(node.rho * out.x_hat)
    try:
        y_new = cho_solve(model.normal_factor, rhs)
    except ValueError as e:
        raise EngineError(f"central update failed: {e}")
    if not np.all(np.isfinite(y_new)):
        raise EngineError("central update produced non-finite voltages")

    # 3. Multipliers and consistency projection.
    new_iterates = []
    for node, it, out in zip(model.nodes, iterates, outcomes):
        x_new = node.project_from_central(y_new)
        z_new = it.z + node.rho * (out.x_hat - x_new)
        new_iterates.append(NodeIterate(x=x_new, z=z_new, tau=tau, eps=out.eps, last_case=out.tag,
                                        zeta_hat=out.zeta if out.tag != CaseTag.REJECTED else it.x))

    # 4. Schedules.
    k = central.k + 1
    new_central = CentralState(y=y_new, delta=central.delta - config.a * central.delta ** 2,
                               k=k, tau_max=config.tau0 / k)

    # 5. Trace and message accounting.
    x_old = [it.x for it in iterates]
    x_new = [it.x for it in new_iterates]
    z_old = [it.z for it in iterates]
    z_new = [it.z for it in new_iterates]
    H, W = surrogate_and_lagrangian(x_new, y_new, z_new, model, u=[out.u for out in outcomes])
    tags = [out.tag for out in outcomes]
    n_power = sum(node.layout.n_power for node in model.nodes)
    record = IterationRecord(
        k=k, W=W, H=H,
        dx=float(np.linalg.norm(np.concatenate(x_new) - np.concatenate(x_old))),
        dy=float(np.linalg.norm(y_new - y)),
        dz=float(np.linalg.norm(np.concatenate(z_new) - np.concatenate(z_old))),
        n_exact=tags.count(CaseTag.EXACT), n_proj=tags.count(CaseTag.PROJECTED),
        n_reject=tags.count(CaseTag.REJECTED),
        max_node_ms=max(out.elapsed_ms for out in outcomes) if config.timing else 0.0,
        msgs_power=2 * n_power + model.Nb, msgs_voltage=4 * model.Nb,
    )
    invariant = None
    if config.monitor:
        invariant = _monitor(model, k, x_old, x_new, y, y_new, z_old, z_new, outcomes,
                             central.delta, tau, H, H_prev, descent_C)
    return StepReport(iterates=new_iterates, central=new_central, record=record,
                      invariant=invariant, outcomes=outcomes)


def _charge(ledger: CommLedger, model: StarModel) -> None:
    for node in model.nodes:
        ledger.power_to_nodes += node.layout.n_power
        ledger.power_to_center += node.layout.n_power + 1
        ledger.voltage_to_nodes += 2
        ledger.voltage_to_center += 2


def run(case: NetworkCase, config: EngineConfig, trace_path: Optional[Union[str, Path]] = None,
        adm: Optional[AdmittanceModel] = None, model: Optional[StarModel] = None,
        opts: Optional[SdpOptions] = None) -> RunResult:
    """Run the iteration to termination and assemble the result."""
    adm = adm or build_admittance(case)
    model = model or build_star_model(case, adm, config, workers=config.workers)
    iterates, central = initialize(model, config)
    _, W0 = surrogate_and_lagrangian([it.x for it in iterates], central.y, [it.z for it in iterates], model)
    trace = IterationTrace(W0=W0)
    ledger = CommLedger()
    invariants: List[InvariantRecord] = []

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        while not termination_check(trace, config):
            C = 10 * abs(trace.H0) if trace.H0 is not None else 0.0
            H_prev = trace.rows[-1].H if trace.rows else None
            step = iterate_once(model, iterates, central, config, pool, opts, H_prev=H_prev, descent_C=C)
            iterates, central = step.iterates, step.central
            if trace.H0 is None:
                trace.H0 = step.record.H
            trace.rows.append(step.record)
            _charge(ledger, model)
            if step.invariant is not None:
                invariants.append(step.invariant)
            if trace_path is not None:
                write_trace_row(trace_path, step.record, header=step.record.k == 1)
            logger.info(f"k={step.record.k} W={step.record.W:.6f} H={step.record.H:.6f} "
                        f"exact/proj/reject={step.record.n_exact}/{step.record.n_proj}/{step.record.n_reject}")
    finally:
        if pool is not None:
            pool.shutdown()

    status = RunStatus.CONVERGED if converged(trace, config) else RunStatus.MAX_ITER
    if status == RunStatus.MAX_ITER:
        logger.warning(f"{case.name}: stopped at the iteration limit ({config.max_iter})")
    return assemble_result(model, iterates, central, trace, ledger, invariants, status)


def assemble_result(model: StarModel, iterates: List[NodeIterate], central: CentralState,
                    trace: IterationTrace, ledger: CommLedger, invariants: List[InvariantRecord],
                    status: RunStatus) -> RunResult:
    case, nb = model.case, model.Nb
    y = central.y
    v_M = y[2 * nb:]
    v_L = y[:2 * nb]
    V = v_M[:nb] + 1j * v_M[nb:]
    mismatch = phase_align_and_compare(v_L[:nb] + 1j * v_L[nb:], V).distance

    Pg, Qg = np.zeros(case.Ng), np.zeros(case.Ng)
    for node, it in zip(model.nodes, iterates):
        pg, qg = node.dispatch(it.x)
        Pg[node.basis.gens] = pg
        Qg[node.basis.gens] = qg

    W_final = trace.rows[-1].W if trace.rows else trace.W0
    return RunResult(
        case=case.name, status=status, iterations=len(trace.rows),
        voltages_re=V.real.tolist(), voltages_im=V.imag.tolist(),
        Pg=Pg.tolist(), Qg=Qg.tolist(),
        objective=central_objective(Pg, model.costs),
        constant_cost=float(model.costs.constant.sum()),
        channel_mismatch=float(mismatch),
        feasibility=feasibility_residuals(V, Pg + 1j * Qg, case, model.adm),
        trace=trace.rows, eta=eta_series([row.W for row in trace.rows], W_final),
        ledger=ledger, invariants=invariants,
        descent_violations=sum(1 for inv in invariants if inv.descent_violation),
    )
