import pytest
import numpy as np

from modules.config import get_settings
from modules.diagnostics import reference_opf
from modules.case_ingest import build_admittance, load_case
from modules.models import EngineConfig, ReferenceSolution
from modules.network_tensor import build_star_model

CASES = get_settings().cases_dir


@pytest.fixture(scope="session")
def cases_dir():
    return CASES


@pytest.fixture(scope="session")
def case3():
    return load_case(CASES / "case3.m")


@pytest.fixture(scope="session")
def case5():
    return load_case(CASES / "case5.m")


@pytest.fixture(scope="session")
def case9():
    return load_case(CASES / "case9.m")


@pytest.fixture(scope="session")
def case14():
    return load_case(CASES / "case14.m")


@pytest.fixture(scope="session")
def adm3(case3):
    return build_admittance(case3)


@pytest.fixture(scope="session")
def adm9(case9):
    return build_admittance(case9)


@pytest.fixture(scope="session")
def model3(case3, adm3):
    return build_star_model(case3, adm3, EngineConfig())


@pytest.fixture(scope="session")
def model9(case9, adm9):
    return build_star_model(case9, adm9, EngineConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_voltage(rng, nb: int) -> np.ndarray:
    """Complex voltages near the flat profile."""
    return (1 + 0.05 * rng.standard_normal(nb)) * np.exp(1j * 0.2 * rng.standard_normal(nb))


def matpower_text(bus_rows, branch_rows, gen_rows, cost_rows=None) -> str:
    """Small MATPOWER case assembled from row strings."""
    lines = ["function mpc = tiny", "mpc.version = '2';", "mpc.baseMVA = 100;", "mpc.bus = ["]
    lines += [f"\t{row};" for row in bus_rows] + ["];", "mpc.gen = ["]
    lines += [f"\t{row};" for row in gen_rows] + ["];", "mpc.branch = ["]
    lines += [f"\t{row};" for row in branch_rows] + ["];"]
    if cost_rows is not None:
        lines += ["mpc.gencost = ["] + [f"\t{row};" for row in cost_rows] + ["];"]
    return "\n".join(lines) + "\n"


TRIANGLE_BUSES = [
    "1 3 0 0 0 0 1 1 0 345 1 1.1 0.9",
    "2 2 0 0 0 0 1 1 0 345 1 1.1 0.9",
    "3 1 90 30 0 0 1 1 0 345 1 1.1 0.9",
]
TRIANGLE_BRANCHES = [
    "1 2 0.01 0.085 0.176 250 250 250 0 0 1 -360 360",
    "1 3 0.017 0.092 0.158 250 250 250 0 0 1 -360 360",
    "2 3 0.039 0.17 0.358 150 150 150 0 0 1 -360 360",
]
TRIANGLE_GENS = [
    "1 0 0 100 -100 1 100 1 200 10",
    "2 0 0 100 -100 1 100 1 200 10",
]
TRIANGLE_COSTS = ["2 0 0 3 0.11 5 150", "2 0 0 3 0.085 1.2 600"]


def ladder_text(n: int) -> str:
    """n buses in a chain: a generator on bus 1 and equal loads on the rest."""
    buses = ["1 3 0 0 0 0 1 1 0 345 1 1.1 0.9"]
    buses += [f"{i} 1 10 3 0 0 1 1 0 345 1 1.1 0.9" for i in range(2, n + 1)]
    branches = [f"{i} {i + 1} 0.01 0.05 0.02 0 0 0 0 0 1 -360 360" for i in range(1, n)]
    return matpower_text(buses, branches, ["1 0 0 300 -300 1 100 1 500 0"], ["2 0 0 3 0.01 10 0"])


@pytest.fixture(scope="session")
def optional_case():
    """Case from the cases directory, skipping the test when the file is not there."""
    def load(name: str):
        path = CASES / f"{name}.m"
        if not path.is_file():
            pytest.skip(f"{name}.m is not in {CASES}")
        return load_case(path)
    return load


@pytest.fixture(scope="session")
def reference9(case9, adm9, tmp_path_factory):
    """Central OPF solution of case9 written to JSON and read back, as `reference` stores it."""
    path = tmp_path_factory.mktemp("reference") / "case9.json"
    path.write_text(reference_opf(case9, adm9).model_dump_json(indent=2))
    return ReferenceSolution.model_validate_json(path.read_text())
