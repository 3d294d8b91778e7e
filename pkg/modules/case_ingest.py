"""Case-file readers and the admittance model built from them.

Two formats are accepted: MATPOWER text cases (``mpc.bus``, ``mpc.branch``,
``mpc.gen``, ``mpc.gencost``) and the JSON schema documented in
``docs/format.md``. The MATPOWER reader converts to per-unit on baseMVA and
drops out-of-service elements; the result is the same ``NetworkCase`` the JSON
reader produces.
"""
import re
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from modules.models import (
    BranchRecord,
    BusRecord,
    BusType,
    CaseFormatError,
    CaseValidationError,
    CostRecord,
    GenRecord,
    NetworkCase,
)

logger = logging.getLogger(__name__)

# Minimum column counts of the MATPOWER matrices we read.
_MIN_COLUMNS = {"bus": 13, "branch": 11, "gen": 10}
_BUS_TYPES = {1: BusType.PQ, 2: BusType.PV, 3: BusType.REF}

_MATRIX_START = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)")


@dataclass(frozen=True)
class AdmittanceModel:
    Ybus: np.ndarray
    Yf: np.ndarray
    Yt: np.ndarray
    Cf: np.ndarray
    Ct: np.ndarray
    Ysh: np.ndarray
    # Per-branch primitives: | If |   | Yff  Yft | | Vf |
    #                        | It | = | Ytf  Ytt | | Vt |
    Yff: np.ndarray
    Yft: np.ndarray
    Ytf: np.ndarray
    Ytt: np.ndarray
    f: np.ndarray
    t: np.ndarray

    @property
    def Nb(self) -> int:
        return self.Ybus.shape[0]

    @property
    def Nl(self) -> int:
        return self.Yf.shape[0]


# --- MATPOWER text front-end ---

def _read_matrices(text: str) -> Tuple[Dict[str, List[Tuple[int, List[float]]]], float]:
    """Collect every ``mpc.<name> = [...]`` block as (line number, row) pairs."""
    matrices: Dict[str, List[Tuple[int, List[float]]]] = {}
    base_mva = None
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            scalar = _SCALAR.search(line)
            if scalar:
                base_mva = float(scalar.group(1))
                continue
            start = _MATRIX_START.search(line)
            if not start:
                continue
            current = start.group(1)
            matrices[current] = []
            line = start.group(2)
        closed = "]" in line
        line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                matrices[current].append((lineno, [float(tok) for tok in tokens]))
            except ValueError:
                raise CaseFormatError(f"non-numeric entry in mpc.{current}: {chunk.strip()!r}", lineno)
        if closed:
            current = None
    if current is not None:
        raise CaseFormatError(f"mpc.{current} matrix is never closed")
    if not matrices and base_mva is None:
        raise CaseFormatError("no mpc structure found")
    for name in ("bus", "branch", "gen"):
        if name not in matrices:
            raise CaseFormatError(f"missing mpc.{name} matrix")
        for lineno, row in matrices[name]:
            if len(row) < _MIN_COLUMNS[name]:
                raise CaseFormatError(
                    f"mpc.{name} row has {len(row)} columns, expected at least {_MIN_COLUMNS[name]}", lineno)
    return matrices, base_mva if base_mva is not None else 100.0


def _cost_from_row(lineno: int, row: List[float], gen: int) -> CostRecord:
    if len(row) < 4:
        raise CaseFormatError("mpc.gencost row is too short", lineno)
    model, n = int(row[0]), int(row[3])
    if model != 2:
        raise CaseFormatError("only polynomial cost model 2 is supported", lineno)
    coeffs = row[4:4 + n]
    if len(coeffs) != n:
        raise CaseFormatError(f"mpc.gencost row declares {n} coefficients but has {len(coeffs)}", lineno)
    if n > 3:
        raise CaseFormatError("cost polynomials of degree above 2 are not supported", lineno)
    # MATPOWER lists coefficients highest degree first.
    padded = [0.0] * (3 - n) + list(coeffs)
    return CostRecord(gen=gen, a=padded[0], b=padded[1], c=padded[2])


def parse_matpower_text(text: str, name: str = "case") -> NetworkCase:
    matrices, base_mva = _read_matrices(text)

    # 1. Buses (type 4 buses are isolated and dropped).
    buses, seen = [], set()
    for lineno, row in matrices["bus"]:
        bus_id, kind = int(row[0]), int(row[1])
        if bus_id in seen:
            raise CaseValidationError(f"duplicate bus id {bus_id} (line {lineno})")
        seen.add(bus_id)
        if kind == 4:
            logger.warning(f"Dropping isolated bus {bus_id}")
            continue
        if kind not in _BUS_TYPES:
            raise CaseFormatError(f"unknown bus type {kind}", lineno)
        try:
            buses.append(BusRecord(
                id=bus_id, bus_type=_BUS_TYPES[kind],
                Pd=row[2] / base_mva, Qd=row[3] / base_mva,
                Gs=row[4] / base_mva, Bs=row[5] / base_mva,
                baseKV=row[9], Vmax=row[11], Vmin=row[12],
            ))
        except ValidationError as e:
            raise CaseFormatError(str(e.errors()[0]["msg"]), lineno)
    kept = {bus.id for bus in buses}

    # 2. Branches in service between kept buses.
    branches = []
    for lineno, row in matrices["branch"]:
        if int(row[10]) == 0:
            continue
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in seen:
                raise CaseValidationError(f"branch references unknown bus {end} (line {lineno})")
        if f not in kept or t not in kept:
            continue
        try:
            branches.append(BranchRecord(
                from_bus=f, to_bus=t, r=row[2], x=row[3], b=row[4],
                rateA=row[5] / base_mva, tap=row[8], shift=row[9], status=1,
            ))
        except ValidationError as e:
            raise CaseFormatError(str(e.errors()[0]["msg"]), lineno)

    # 3. Generators in service, each with its cost row.
    cost_rows = matrices.get("gencost", [])
    gens, costs = [], []
    for i, (lineno, row) in enumerate(matrices["gen"]):
        bus_id = int(row[0])
        if bus_id not in seen:
            raise CaseValidationError(f"generator references unknown bus {bus_id} (line {lineno})")
        if int(row[7]) <= 0 or bus_id not in kept:
            continue
        try:
            gens.append(GenRecord(
                bus=bus_id, Qmax=row[3] / base_mva, Qmin=row[4] / base_mva,
                Pmax=row[8] / base_mva, Pmin=row[9] / base_mva, status=1,
            ))
        except ValidationError as e:
            raise CaseFormatError(str(e.errors()[0]["msg"]), lineno)
        if i < len(cost_rows):
            cost_line, cost_row = cost_rows[i]
            costs.append(_cost_from_row(cost_line, cost_row, len(gens) - 1))
        else:
            costs.append(CostRecord(gen=len(gens) - 1))

    case = NetworkCase(name=name, baseMVA=base_mva, buses=buses,
                       branches=branches, gens=gens, costs=costs)
    validate_case(case)
    return case


def parse_matpower_case(text: str, name: str = "case") -> NetworkCase:
    """Parse a MATPOWER text case or a JSON case."""
    if text.lstrip().startswith("{"):
        try:
            case = NetworkCase.model_validate_json(text)
        except ValidationError as e:
            raise CaseFormatError(f"invalid JSON case: {e.errors()[0]['msg']}")
        validate_case(case)
        return case
    return parse_matpower_text(text, name)


def validate_case(case: NetworkCase) -> None:
    """Referential checks plus connectivity of the in-service network."""
    index: Dict[int, int] = {}
    for i, bus in enumerate(case.buses):
        if bus.id in index:
            raise CaseValidationError(f"duplicate bus id {bus.id}")
        index[bus.id] = i
    for branch in case.branches:
        for end in (branch.from_bus, branch.to_bus):
            if end not in index:
                raise CaseValidationError(f"branch references unknown bus {end}")
    for gen in case.gens:
        if gen.bus not in index:
            raise CaseValidationError(f"generator references unknown bus {gen.bus}")
    for gen in case.gens:
        if gen.status != 1:
            raise CaseValidationError(f"generator at bus {gen.bus} is out of service; list in-service units only")
    if len(case.costs) != case.Ng:
        raise CaseValidationError(f"{case.Ng} generators but {len(case.costs)} cost rows")
    check_connectivity(case)


def in_service(case: NetworkCase) -> List[BranchRecord]:
    return [br for br in case.branches if br.status == 1]


def check_connectivity(case: NetworkCase) -> None:
    index = case.bus_index()
    live = in_service(case)
    rows = [index[br.from_bus] for br in live]
    cols = [index[br.to_bus] for br in live]
    graph = csr_matrix((np.ones(len(live)), (rows, cols)), shape=(case.Nb, case.Nb))
    n_parts, labels = connected_components(graph, directed=False)
    if n_parts > 1:
        main = np.bincount(labels).argmax()
        island = [case.buses[i].id for i in range(case.Nb) if labels[i] != main]
        raise CaseValidationError(f"network is not connected; island buses {island}")


def serialize_case(case: NetworkCase) -> str:
    return case.model_dump_json(indent=2)


def load_case(path: Union[str, Path]) -> NetworkCase:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        case = parse_matpower_case(text)
        case.name = path.stem
        return case
    case = parse_matpower_text(text, name=path.stem)
    logger.info(f"Parsed {path.name}: Nb={case.Nb}, Nl={case.Nl}, Ng={case.Ng}")
    return case


# --- Admittance ---

def build_admittance(case: NetworkCase) -> AdmittanceModel:
    """Branch pi-model with tap and phase shift; out-of-service branches excluded."""
    index = case.bus_index()
    live = in_service(case)
    nb, nl = case.Nb, len(live)

    r = np.array([br.r for br in live])
    x = np.array([br.x for br in live])
    zero = np.flatnonzero((r == 0) & (x == 0))
    if zero.size:
        br = live[zero[0]]
        raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")

    Ys = 1.0 / (r + 1j * x)
    Bc = np.array([br.b for br in live])
    tap = np.array([br.ratio for br in live]) * np.exp(1j * np.pi / 180 * np.array([br.shift for br in live]))
    Ytt = Ys + 1j * Bc / 2
    Yff = Ytt / (tap * np.conj(tap))
    Yft = -Ys / np.conj(tap)
    Ytf = -Ys / tap

    Ysh = np.array([bus.Gs + 1j * bus.Bs for bus in case.buses])

    f = np.array([index[br.from_bus] for br in live], dtype=int)
    t = np.array([index[br.to_bus] for br in live], dtype=int)
    lines = np.arange(nl)
    Cf = csr_matrix((np.ones(nl), (lines, f)), (nl, nb))
    Ct = csr_matrix((np.ones(nl), (lines, t)), (nl, nb))

    rows = np.r_[lines, lines]
    Yf = csr_matrix((np.r_[Yff, Yft], (rows, np.r_[f, t])), (nl, nb))
    Yt = csr_matrix((np.r_[Ytf, Ytt], (rows, np.r_[f, t])), (nl, nb))
    Ybus = Cf.T @ Yf + Ct.T @ Yt + csr_matrix((Ysh, (range(nb), range(nb))), (nb, nb))

    return AdmittanceModel(
        Ybus=Ybus.toarray(), Yf=Yf.toarray(), Yt=Yt.toarray(),
        Cf=Cf.toarray(), Ct=Ct.toarray(), Ysh=Ysh,
        Yff=Yff, Yft=Yft, Ytf=Ytf, Ytt=Ytt, f=f, t=t,
    )
