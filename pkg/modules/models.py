from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


# --- Errors ---

class DrohsError(Exception):
    """Base class for every error raised by the solver."""


class CaseFormatError(DrohsError):
    """A case file could not be read."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(DrohsError):
    """A parsed case is inconsistent (bad reference, duplicate id, island)."""


class ModelBuildError(DrohsError):
    """The star-network model could not be assembled for a node."""

    def __init__(self, message: str, node: Optional[int] = None):
        self.node = node
        if node is not None:
            message = f"bus {node}: {message}"
        super().__init__(message)


class EngineError(DrohsError):
    """The central iteration cannot proceed."""


# --- Case records (all electrical quantities per-unit on baseMVA) ---

class BusType(str, Enum):
    PQ = "PQ"
    PV = "PV"
    REF = "ref"


class BusRecord(BaseModel):
    id: int = Field(gt=0)
    bus_type: BusType = BusType.PQ
    Pd: float = 0.0
    Qd: float = 0.0
    Gs: float = 0.0
    Bs: float = 0.0
    Vmin: float = 0.9
    Vmax: float = 1.1
    baseKV: float = 0.0

    @model_validator(mode="after")
    def check_voltage_band(self):
        if self.Vmin <= 0:
            raise ValueError(f"bus {self.id}: Vmin must be positive")
        if self.Vmax < self.Vmin:
            raise ValueError(f"bus {self.id}: Vmax below Vmin")
        return self


class BranchRecord(BaseModel):
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 0.0
    shift: float = 0.0
    rateA: float = 0.0
    status: int = 1

    @model_validator(mode="after")
    def check_endpoints(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus} connects a bus to itself")
        return self

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0 else 1.0

    @property
    def limited(self) -> bool:
        return self.rateA > 0


class GenRecord(BaseModel):
    bus: int
    Pmin: float
    Pmax: float
    Qmin: float
    Qmax: float
    status: int = 1

    @model_validator(mode="after")
    def check_box(self):
        if self.Pmax < self.Pmin:
            raise ValueError(f"generator at bus {self.bus}: Pmax below Pmin")
        if self.Qmax < self.Qmin:
            raise ValueError(f"generator at bus {self.bus}: Qmax below Qmin")
        return self


class CostRecord(BaseModel):
    """Raw polynomial coefficients as written in the case file ($/MW^2h, $/MWh, $/h)."""
    gen: int
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    @field_validator("a")
    @classmethod
    def check_convex(cls, v: float) -> float:
        if v < 0:
            raise ValueError("quadratic cost coefficient must be nonnegative")
        return v


class NetworkCase(BaseModel):
    name: str = "case"
    baseMVA: float = 100.0
    buses: List[BusRecord]
    branches: List[BranchRecord]
    gens: List[GenRecord]
    costs: List[CostRecord]

    @property
    def Nb(self) -> int:
        return len(self.buses)

    @property
    def Nl(self) -> int:
        return len(self.branches)

    @property
    def Ng(self) -> int:
        return len(self.gens)

    def bus_index(self) -> Dict[int, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}


# --- Engine configuration ---

class StartMode(str, Enum):
    COLD = "cold"
    FLAT = "flat"
    WARM = "warm"


class EngineConfig(BaseModel):
    rho_power: float = 20.0
    rho_voltage: float = 200.0
    delta0: float = 0.3
    # Step schedule delta <- delta - a delta^2.
    a: float = 0.02
    tau0: float = 1e-3
    max_iter: int = 100
    tol: float = 1e-7
    seed: int = 0
    start: StartMode = StartMode.FLAT
    # Real-stacked voltage (v_x; v_y) of length 2Nb, used by the warm start.
    warm_voltage: Optional[List[float]] = None
    workers: int = 1
    timing: bool = False
    monitor: bool = True

    @field_validator("delta0", "a")
    @classmethod
    def check_open_unit(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("must lie in (0, 1)")
        return v

    @field_validator("tau0", "tol", "rho_power", "rho_voltage")
    @classmethod
    def check_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("seed")
    @classmethod
    def check_seed(cls, v: int) -> int:
        if v < 0:
            raise ValueError("seed must be unsigned")
        return v

    @field_validator("max_iter", "workers")
    @classmethod
    def check_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @model_validator(mode="after")
    def check_warm(self):
        if self.start == StartMode.WARM and self.warm_voltage is None:
            raise ValueError("warm start needs a voltage vector")
        return self


class SdpOptions(BaseModel):
    max_iter: int = 100
    feas_tol: float = 1e-9
    gap_tol: float = 1e-9
    step_fraction: float = 0.98
    infeasible_bound: float = 1e12


# --- Tags and statuses ---

class CaseTag(str, Enum):
    EXACT = "Exact"
    PROJECTED = "Projected"
    REJECTED = "Rejected"


class SdpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


class RunStatus(str, Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"


# --- Reports ---

class FeasibilityReport(BaseModel):
    max_balance: float
    mean_balance: float
    max_flow_violation: float
    max_gen_violation: float
    max_voltage_violation: float
    worst_balance_bus: Optional[int] = None
    worst_flow_branch: Optional[int] = None
    worst_gen: Optional[int] = None
    worst_voltage_bus: Optional[int] = None

    @property
    def worst(self) -> float:
        return max(self.max_balance, self.max_flow_violation,
                   self.max_gen_violation, self.max_voltage_violation)


class SolutionComparison(BaseModel):
    distance: float
    rotation_deg: float
    objective_gap: Optional[float] = None
    worst_bus: int
    worst_deviation: float


class IterationRecord(BaseModel):
    k: int
    W: float
    H: float
    dx: float
    dy: float
    dz: float
    n_exact: int
    n_proj: int
    n_reject: int
    max_node_ms: float
    msgs_power: int
    msgs_voltage: int


class CommLedger(BaseModel):
    power_to_nodes: int = 0
    power_to_center: int = 0
    voltage_to_nodes: int = 0
    voltage_to_center: int = 0

    @property
    def total(self) -> int:
        return (self.power_to_nodes + self.power_to_center
                + self.voltage_to_nodes + self.voltage_to_center)


class InvariantRecord(BaseModel):
    k: int
    phi_z: float
    consistency: float
    orthogonality: float
    range_residual: float
    step_bound_slack: float
    y_bound_slack: float
    z_bound_slack: float
    descent_violation: bool


class RunResult(BaseModel):
    case: str
    status: RunStatus
    iterations: int
    voltages_re: List[float]
    voltages_im: List[float]
    Pg: List[float]
    Qg: List[float]
    objective: float
    constant_cost: float
    channel_mismatch: float
    feasibility: FeasibilityReport
    trace: List[IterationRecord]
    eta: List[Optional[float]]
    eta_label: str = "self"
    ledger: CommLedger
    invariants: List[InvariantRecord] = []
    descent_violations: int = 0


class ReferenceSolution(BaseModel):
    case: str
    status: str
    voltages_re: List[float]
    voltages_im: List[float]
    Pg: List[float]
    Qg: List[float]
    objective: float
    constant_cost: float = 0.0


class NodeRankReport(BaseModel):
    bus: int
    nl: int
    ng: int
    ranks: Dict[str, int]
    expected: Dict[str, int]
    max_residual: float
    n_x: int
    n_mu: int

    @property
    def ok(self) -> bool:
        return self.ranks == self.expected


class ModelReport(BaseModel):
    case: str
    Nb: int
    nodes: List[NodeRankReport]
    ok: bool
