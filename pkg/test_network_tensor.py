import numpy as np
import pytest

from conftest import CASES, random_voltage
from modules.case_ingest import build_admittance, load_case
from modules.models import EngineConfig, ModelBuildError
from modules.network_tensor import (
    NodalLayout,
    QuantityKind,
    build_star_model,
    cost_scale,
    evaluate_quantities,
    low_rank_decompose,
    model_report,
    nodal_dispatch,
    numerical_rank,
    project_to_nodal,
    reactive_split,
    symmetric_quadratic_matrix,
)


def stacked(v: np.ndarray) -> np.ndarray:
    return np.r_[v.real, v.imag]


def test_quadratic_forms_reproduce_complex_power(adm9, rng):
    V = random_voltage(rng, adm9.Nb)
    v = stacked(V)
    S = V * np.conj(adm9.Ybus @ V)
    for j in range(adm9.Nb):
        P = symmetric_quadratic_matrix(adm9, QuantityKind.P_INJ, j)
        Q = symmetric_quadratic_matrix(adm9, QuantityKind.Q_INJ, j)
        E = symmetric_quadratic_matrix(adm9, QuantityKind.VMAG, j)
        assert v @ P @ v == pytest.approx(S[j].real, abs=1e-10)
        assert v @ Q @ v == pytest.approx(S[j].imag, abs=1e-10)
        assert v @ E @ v == pytest.approx(abs(V[j]) ** 2)
        np.testing.assert_array_equal(P, P.T)


def test_flow_forms_at_both_ends(adm9, rng):
    V = random_voltage(rng, adm9.Nb)
    v = stacked(V)
    S_f = (adm9.Cf @ V) * np.conj(adm9.Yf @ V)
    S_t = (adm9.Ct @ V) * np.conj(adm9.Yt @ V)
    for l in range(adm9.Nl):
        for j, S in ((adm9.f[l], S_f[l]), (adm9.t[l], S_t[l])):
            P = symmetric_quadratic_matrix(adm9, QuantityKind.P_FLOW, j, l)
            Q = symmetric_quadratic_matrix(adm9, QuantityKind.Q_FLOW, j, l)
            assert v @ P @ v == pytest.approx(S.real, abs=1e-10)
            assert v @ Q @ v == pytest.approx(S.imag, abs=1e-10)


def test_flow_form_needs_an_incident_line(adm9):
    far = next(l for l in range(adm9.Nl) if 0 not in (adm9.f[l], adm9.t[l]))
    with pytest.raises(ModelBuildError, match="not incident"):
        symmetric_quadratic_matrix(adm9, QuantityKind.P_FLOW, 0, far)


@pytest.mark.parametrize("path", sorted(CASES.glob("*.m")), ids=lambda p: p.stem)
def test_every_case_in_the_cases_directory_has_the_expected_ranks(path):
    case = load_case(path)
    report = model_report(case, build_admittance(case))
    assert report.ok
    for node in report.nodes:
        assert node.max_residual < 1e-10
        assert node.n_x == 8 * node.nl + 10
        assert node.n_mu == 10 * node.nl + 2 * node.ng + 11


def test_case14_cardinalities(case14):
    report = model_report(case14, build_admittance(case14))
    by_bus = {node.bus: node for node in report.nodes}
    # Bus 4 meets lines to 2, 3, 5, 7 and 9.
    assert by_bus[4].nl == 5
    assert by_bus[4].n_x == 50
    # Bus 8 hosts a generator on a single line.
    assert (by_bus[8].nl, by_bus[8].ng, by_bus[8].n_mu) == (1, 1, 23)


def test_decomposition_reconstructs_and_has_split_signature(adm9):
    for kind in (QuantityKind.P_INJ, QuantityKind.Q_INJ):
        M = symmetric_quadratic_matrix(adm9, kind, 3)
        Phi, sig = low_rank_decompose(M, 4)
        np.testing.assert_allclose(Phi @ np.diag(sig) @ Phi.T, M, atol=1e-10)
        assert sorted(sig) == [-1, -1, 1, 1]
        # Columns by descending magnitude, positive first on a tie.
        norms = np.linalg.norm(Phi, axis=0)
        assert np.all(np.diff(norms) <= 1e-9 * norms[0])
    Phi, sig = low_rank_decompose(symmetric_quadratic_matrix(adm9, QuantityKind.VMAG, 3), 2)
    assert list(sig) == [1, 1]


def test_decomposition_is_deterministic(adm9):
    M = symmetric_quadratic_matrix(adm9, QuantityKind.P_INJ, 4)
    first, _ = low_rank_decompose(M, 4)
    second, _ = low_rank_decompose(M.copy(), 4)
    np.testing.assert_array_equal(first, second)
    for c in range(first.shape[1]):
        assert first[np.argmax(np.abs(first[:, c])), c] > 0


def test_wrong_rank_is_refused(adm9):
    M = symmetric_quadratic_matrix(adm9, QuantityKind.VMAG, 0)
    assert numerical_rank(M) == 2
    with pytest.raises(ModelBuildError, match="numerical rank 2, expected 4"):
        low_rank_decompose(M, 4)
    with pytest.raises(ModelBuildError, match="rank 0"):
        low_rank_decompose(np.zeros((4, 4)), 2)


def test_layout_positions():
    layout = NodalLayout(nl=3, ng=1)
    assert (layout.n_power, layout.n_x, layout.n_mu) == (32, 34, 43)
    assert layout.gamma(2) == slice(16, 20)
    assert layout.delta(0) == slice(20, 24)
    assert layout.omega == slice(32, 34)
    assert (layout.f(0), layout.fbar(2), layout.gp(0), layout.gq(0), layout.end) == (34, 39, 40, 41, 42)


@pytest.mark.parametrize("name", ["case3", "case5", "case9", "case14"])
def test_nodal_quantities_hold_for_many_voltages(name, request, rng):
    case = request.getfixturevalue(name)
    adm = build_admittance(case)
    model = build_star_model(case, adm, EngineConfig())
    close = lambda got, want: abs(got - want) <= 1e-10 * max(1.0, abs(want))
    for _ in range(100):
        V = random_voltage(rng, adm.Nb)
        v = stacked(V)
        S = V * np.conj(adm.Ybus @ V)
        for node in model.nodes:
            j = node.basis.node
            qty = evaluate_quantities(project_to_nodal(v, node.basis), node.basis)
            assert close(qty.p, S[j].real) and close(qty.q, S[j].imag)
            assert close(qty.E, abs(V[j]) ** 2)
            for k, l in enumerate(node.basis.lines):
                P = symmetric_quadratic_matrix(adm, QuantityKind.P_FLOW, j, l)
                Q = symmetric_quadratic_matrix(adm, QuantityKind.Q_FLOW, j, l)
                assert close(qty.f[k], v @ P @ v) and close(qty.fbar[k], v @ Q @ v)


def test_injection_pair_has_closed_form_eigenpairs(adm9):
    nb = adm9.Nb
    for j in range(nb):
        row = adm9.Ybus[j]
        a = np.r_[row.real, -row.imag]
        a /= np.linalg.norm(a)
        e = np.zeros(2 * nb)
        e[j] = 1.0
        lam = np.linalg.eigvalsh(np.outer(e, a) + np.outer(a, e))
        assert lam[-1] == pytest.approx(0.5 * np.linalg.norm(e + a) ** 2, abs=1e-10)
        assert lam[0] == pytest.approx(-0.5 * np.linalg.norm(e - a) ** 2, abs=1e-10)
        assert np.sum(np.abs(lam) > 1e-10) == 2


def test_consistency_rows_vanish_on_consistent_projections(model9, rng):
    for _ in range(5):
        V = random_voltage(rng, model9.Nb)
        y = np.r_[stacked(V), stacked(V)]
        for node in model9.nodes:
            R = node.consistency_rows()
            assert R.shape[1] == node.layout.n_x
            assert np.abs(R @ node.project_from_central(y)).max() <= 1e-9


def test_coupling_rows_measure_the_channel_gap(model9, rng):
    nb = model9.Nb
    v_L, v_M = stacked(random_voltage(rng, nb)), stacked(random_voltage(rng, nb))
    y = np.r_[v_L, v_M]
    for node in model9.nodes:
        j = node.basis.node
        gap = node.consistency_rows()[-2:] @ node.project_from_central(y)
        np.testing.assert_allclose(gap, [v_M[j] - v_L[j], v_M[nb + j] - v_L[nb + j]], atol=1e-9)
        # Null-space rows vanish for any v_L.
        assert np.abs(node.consistency_rows()[:-2] @ node.project_from_central(y)).max() <= 1e-9


def test_cost_scale_is_the_system_marginal_cost(case9, model9):
    # Lossless dispatch of 315 MW over the three units at equal incremental cost.
    assert cost_scale(case9, model9.costs) == pytest.approx(2404.4, rel=1e-3)
    assert model9.cost_scale == cost_scale(case9, model9.costs)
    node = model9.nodes[0]
    np.testing.assert_allclose(node.M_ob[node.layout.gp(0), node.layout.gp(0)],
                               node.cost_a[0] / model9.cost_scale)


def test_nodal_quantities_match_network_quantities(model9, adm9, rng):
    V = random_voltage(rng, adm9.Nb)
    v = stacked(V)
    S = V * np.conj(adm9.Ybus @ V)
    for node in model9.nodes:
        j = node.basis.node
        qty = evaluate_quantities(project_to_nodal(v, node.basis), node.basis)
        assert qty.p == pytest.approx(S[j].real, abs=1e-10)
        assert qty.q == pytest.approx(S[j].imag, abs=1e-10)
        assert qty.E == pytest.approx(abs(V[j]) ** 2)
        for k, l in enumerate(node.basis.lines):
            M = symmetric_quadratic_matrix(adm9, QuantityKind.P_FLOW, j, l)
            assert qty.f[k] == pytest.approx(v @ M @ v, abs=1e-10)


def test_balance_matrices_hold_at_a_consistent_point(model9, rng):
    V = random_voltage(rng, model9.Nb)
    y = np.r_[stacked(V), stacked(V)]
    node = model9.nodes[0]
    lay, pis = node.layout, node.pis
    x = node.project_from_central(y)
    qty = node.quantities(x)
    pg, qg = node.dispatch(x)
    mu = np.r_[x, qty.f, qty.fbar, pg, qg, 1.0]
    assert mu.size == lay.n_mu
    assert mu @ pis.Pi_S @ mu == pytest.approx(-node.d, abs=1e-10)
    assert mu @ pis.Pi_Sbar @ mu == pytest.approx(-node.dbar, abs=1e-10)
    for F in pis.Pi_F + pis.Pi_Fbar:
        assert mu @ F @ mu == pytest.approx(0.0, abs=1e-10)
    assert mu @ pis.Pi_E @ mu == pytest.approx(abs(V[0]) ** 2)


def test_dispatch_equalizes_incremental_cost():
    a = np.array([1.0, 2.0, 4.0])
    b = np.array([0.5, 0.5, 0.5])
    g = nodal_dispatch(1.4, a, b, np.zeros(3), np.full(3, 10.0))
    assert g.sum() == pytest.approx(1.4)
    np.testing.assert_allclose(2 * a * g + 2 * b, (2 * a * g + 2 * b)[0], rtol=1e-8)


def test_dispatch_respects_boxes_and_always_sums():
    a, b = np.array([1.0, 1.0]), np.array([0.0, 5.0])
    g = nodal_dispatch(1.0, a, b, np.zeros(2), np.array([0.6, 2.0]))
    assert g[0] == pytest.approx(0.6)
    assert g.sum() == pytest.approx(1.0)
    above = nodal_dispatch(5.0, a, b, np.zeros(2), np.ones(2))
    np.testing.assert_allclose(above, [2.5, 2.5])
    assert nodal_dispatch(0.3, a[:1], b[:1], np.zeros(1), np.ones(1))[0] == 0.3


def test_reactive_split_uses_a_common_fraction():
    q = reactive_split(0.5, np.array([-1.0, 0.0]), np.array([1.0, 1.0]))
    assert q.sum() == pytest.approx(0.5)
    assert (q[0] + 1) / 2 == pytest.approx(q[1])


def test_star_model_operators(model9, rng):
    Phi = model9.Phi.toarray()
    assert Phi.shape == (4 * model9.Nb, sum(node.layout.n_x for node in model9.nodes))
    np.testing.assert_allclose(model9.normal, Phi @ np.diag(model9.d_rho) @ Phi.T, atol=1e-9)
    y = rng.standard_normal(4 * model9.Nb)
    for node in model9.nodes:
        cols = slice(node.offset, node.offset + node.layout.n_x)
        np.testing.assert_allclose(node.project_from_central(y), Phi[:, cols].T @ y, atol=1e-12)
        w = rng.standard_normal(node.layout.n_x)
        np.testing.assert_allclose(node.lift_to_central(w), Phi[:, cols] @ w, atol=1e-12)
    assert model9.sigma_min > 0
    assert model9.rho_max == 200.0 and model9.rho_min == 20.0


def test_parallel_build_is_identical(case9, adm9, model9):
    again = build_star_model(case9, adm9, EngineConfig(), workers=4)
    np.testing.assert_array_equal(again.normal, model9.normal)
    for a, b in zip(again.nodes, model9.nodes):
        np.testing.assert_array_equal(a.basis.Phi_L, b.basis.Phi_L)
