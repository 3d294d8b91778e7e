import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from modules.case_ingest import build_admittance
from modules.diagnostics import phase_align_and_compare, reference_opf, surrogate_and_lagrangian
from modules.drohs_engine import IterationTrace, initialize, iterate_once, run, termination_check
from modules.models import (
    CaseTag,
    EngineConfig,
    EngineError,
    IterationRecord,
    RunStatus,
    StartMode,
)


def record(k: int, W: float) -> IterationRecord:
    return IterationRecord(k=k, W=W, H=W, dx=0, dy=0, dz=0, n_exact=0, n_proj=0, n_reject=0,
                           max_node_ms=0, msgs_power=0, msgs_voltage=0)


def node_block(model, j):
    node = model.nodes[j]
    return model.Phi[:, node.offset:node.offset + node.layout.n_x]


def test_config_validation():
    with pytest.raises(ValidationError):
        EngineConfig(delta0=1.5)
    with pytest.raises(ValidationError):
        EngineConfig(a=0.0)
    with pytest.raises(ValidationError):
        EngineConfig(workers=0)
    with pytest.raises(ValidationError, match="warm start"):
        EngineConfig(start=StartMode.WARM)


def test_flat_start(model3):
    iterates, central = initialize(model3, EngineConfig(seed=3))
    nb = model3.Nb
    np.testing.assert_array_equal(central.y[:nb], 1.0)
    assert np.all(np.abs(central.y[nb:2 * nb]) <= 0.1)
    np.testing.assert_array_equal(central.y[:2 * nb], central.y[2 * nb:])
    assert (central.k, central.delta, central.tau_max) == (0, 0.3, 1e-3)
    for j, (node, it) in enumerate(zip(model3.nodes, iterates)):
        np.testing.assert_allclose(it.x, node.project_from_central(central.y))
        assert np.linalg.norm(node_block(model3, j) @ it.z) <= 1e-10
        assert np.linalg.norm(it.z) > 0


def test_cold_start_is_seeded(model3):
    _, first = initialize(model3, EngineConfig(start=StartMode.COLD, seed=5))
    _, second = initialize(model3, EngineConfig(start=StartMode.COLD, seed=5))
    _, other = initialize(model3, EngineConfig(start=StartMode.COLD, seed=6))
    np.testing.assert_array_equal(first.y, second.y)
    assert not np.array_equal(first.y, other.y)
    assert np.all(np.abs(first.y) <= 1)


def test_warm_start(model3):
    nb = model3.Nb
    v = np.r_[np.full(nb, 1.02), np.linspace(0, -0.1, nb)]
    _, central = initialize(model3, EngineConfig(start=StartMode.WARM, warm_voltage=v.tolist()))
    np.testing.assert_array_equal(central.y, np.r_[v, v])
    with pytest.raises(EngineError, match="length"):
        initialize(model3, EngineConfig(start=StartMode.WARM, warm_voltage=[1.0, 0.0]))


def test_termination_needs_three_small_changes():
    config = EngineConfig(tol=1e-6, max_iter=50)
    trace = IterationTrace(W0=10.0)
    trace.rows = [record(1, 5.0), record(2, 5.0)]
    assert not termination_check(trace, config)
    trace.rows.append(record(3, 5.0))
    assert not termination_check(trace, config)
    trace.rows.append(record(4, 5.0))
    assert termination_check(trace, config)
    trace.rows.append(record(5, 5.1))
    assert not termination_check(trace, config)


def test_termination_at_the_iteration_cap():
    trace = IterationTrace(W0=0.0, rows=[record(k, float(k)) for k in range(1, 4)])
    assert termination_check(trace, EngineConfig(max_iter=3))


def test_one_iteration_keeps_the_invariants(model3):
    config = EngineConfig()
    iterates, central = initialize(model3, config)
    step = iterate_once(model3, iterates, central, config)
    rec, inv = step.record, step.invariant

    assert rec.k == 1
    assert rec.n_exact + rec.n_proj + rec.n_reject == model3.Nb
    assert step.central.delta == pytest.approx(0.3 - config.a * 0.3 ** 2)
    assert step.central.tau_max == pytest.approx(1e-3)
    assert inv.phi_z <= 1e-7
    assert inv.consistency <= 1e-10
    assert inv.orthogonality <= 1e-6
    assert inv.range_residual <= 1e-6
    assert min(inv.step_bound_slack, inv.y_bound_slack, inv.z_bound_slack) >= -1e-9
    assert not inv.descent_violation
    for node, it in zip(model3.nodes, step.iterates):
        np.testing.assert_allclose(it.x, node.project_from_central(step.central.y), atol=1e-12)
    # Only the sum over nodes is annihilated once the multipliers have moved.
    z_all = np.concatenate([it.z for it in step.iterates])
    assert np.linalg.norm(model3.Phi @ z_all) <= 1e-7 * np.linalg.norm(z_all)
    for out, it in zip(step.outcomes, iterates):
        if out.tag == CaseTag.REJECTED:
            np.testing.assert_array_equal(out.x_hat, it.x)
        else:
            node = model3.nodes[out.node]
            assert np.linalg.norm(node.consistency_rows() @ out.zeta) <= 1e-6


def test_recorded_w_is_reproduced_from_the_dumped_state(model3, tmp_path):
    config = EngineConfig()
    iterates, central = initialize(model3, config)
    for _ in range(2):
        step = iterate_once(model3, iterates, central, config)
        iterates, central = step.iterates, step.central
    path = tmp_path / "state.npz"
    np.savez(path, *[it.x for it in iterates], *[it.z for it in iterates], y=central.y)
    dumped = np.load(path)
    n = model3.Nb
    x = [dumped[f"arr_{j}"] for j in range(n)]
    z = [dumped[f"arr_{n + j}"] for j in range(n)]
    _, W = surrogate_and_lagrangian(x, dumped["y"], z, model3)
    assert W == pytest.approx(step.record.W, abs=1e-10 * max(1.0, abs(W)))


def test_short_run_writes_trace_and_ledger(case3, adm3, model3, tmp_path):
    trace_path = tmp_path / "trace.csv"
    result = run(case3, EngineConfig(max_iter=2), trace_path=trace_path, adm=adm3, model=model3)
    assert result.status == RunStatus.MAX_ITER
    assert result.iterations == 2
    frame = pd.read_csv(trace_path)
    assert list(frame.columns) == list(IterationRecord.model_fields)
    assert list(frame["k"]) == [1, 2]
    assert (frame["max_node_ms"] == 0).all()

    n_power = sum(node.layout.n_power for node in model3.nodes)
    assert result.ledger.power_to_nodes == 2 * n_power
    assert result.ledger.power_to_center == 2 * (n_power + model3.Nb)
    assert result.ledger.total == sum(row.msgs_power + row.msgs_voltage for row in result.trace)
    assert len(result.voltages_re) == case3.Nb
    assert len(result.Pg) == case3.Ng
    assert len(result.eta) == 2 and result.eta[-1] == pytest.approx(0.0)
    assert len(result.invariants) == 2


def test_worker_count_does_not_change_the_trace(case3, adm3, model3, tmp_path):
    one, four = tmp_path / "one.csv", tmp_path / "four.csv"
    run(case3, EngineConfig(max_iter=2, seed=7, workers=1), trace_path=one, adm=adm3, model=model3)
    run(case3, EngineConfig(max_iter=2, seed=7, workers=4), trace_path=four, adm=adm3, model=model3)
    assert one.read_bytes() == four.read_bytes()


def assert_matches_reference(case, result):
    adm = build_admittance(case)
    reference = reference_opf(case, adm)
    V = np.asarray(result.voltages_re) + 1j * np.asarray(result.voltages_im)
    V_ref = np.asarray(reference.voltages_re) + 1j * np.asarray(reference.voltages_im)
    comparison = phase_align_and_compare(V, V_ref, result.objective, reference.objective)
    assert comparison.distance <= 1e-4
    assert comparison.objective_gap <= 1e-4
    assert result.feasibility.worst <= 1e-5
    assert result.channel_mismatch <= 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("name", ["case3", "case9", "case14"])
def test_flat_start_matches_the_central_solution(name, request):
    case = request.getfixturevalue(name)
    result = run(case, EngineConfig())
    assert result.status == RunStatus.CONVERGED
    assert result.iterations <= 100
    assert result.descent_violations == 0
    assert_matches_reference(case, result)


@pytest.mark.slow
def test_case30_flat_start(optional_case):
    case = optional_case("case30")
    result = run(case, EngineConfig())
    assert result.status == RunStatus.CONVERGED
    assert_matches_reference(case, result)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["case14", "case39"])
def test_cold_start_outcome_is_reported(name, request, optional_case, caplog):
    case = request.getfixturevalue(name) if name == "case14" else optional_case(name)
    result = run(case, EngineConfig(start=StartMode.COLD, seed=1))
    assert result.iterations == len(result.trace)
    assert np.all(np.isfinite(result.voltages_re))
    if result.status == RunStatus.MAX_ITER:
        assert "iteration limit" in caplog.text
