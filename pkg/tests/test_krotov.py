import warnings

import numpy as np
import pytest
import scipy.linalg

from itoqoc.krotov import (
    ControlField,
    ControlProblem,
    GateFunctional,
    JointLoopDiverged,
    KrotovConfig,
    ShapeFunction,
    StateToState,
    backward_costate,
    costate_terminal,
    forward,
    functional_value,
    gradient,
    optimize,
    pwc_update,
)
from itoqoc.models import FreqHoModel
from itoqoc.propagators import ItoConfig
from itoqoc.quantum import ket

CNOT_LEVELS = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


def _toy(n_steps=200, horizon=1.0, guess=0.3):
    """Three-level ladder steered from |0> towards |2>."""
    h0 = np.diag([0.0, 1.0, 1.7]).astype(complex)
    h1 = np.array([[0, 1, 0], [1, 0, np.sqrt(2)], [0, np.sqrt(2), 0]], dtype=complex)
    return ControlProblem(h0, h1, ket(0, 3), StateToState(ket(2, 3)), horizon, n_steps,
                          guess=lambda t: guess + 0.2 * np.sin(3.0 * t))


def _ho(n_steps=200):
    m = FreqHoModel(n_ho=60)
    kin, pot = m.operators()
    return ControlProblem(kin, pot, m.initial_state(), StateToState(m.target_state()), 2.0,
                          n_steps, guess=lambda t: np.ones_like(t))


# ---------------------------------------------------------------------------
# shape and field


def test_shape_bounds_and_edges():
    t = np.linspace(0, 3.0, 301)
    for kind in ("sin2", "flattop"):
        s = ShapeFunction(3.0, kind, 0.2)(t)
        assert np.all((0 <= s) & (s <= 1))
        assert s[0] == 0 and s[-1] == pytest.approx(0, abs=1e-15)
    assert np.all(ShapeFunction(3.0, "flat")(t) == 1)
    with pytest.raises(ValueError):
        ShapeFunction(1.0, "box")
    with pytest.raises(ValueError):
        ShapeFunction(1.0, "flattop", 0.7)


def test_field_sub_values_first_column():
    f = ControlField.from_function(np.cos, 2.0, 20, m_order=6)
    assert np.array_equal(f.sub_values[:, 0], f.grid_values[:-1])
    assert f.sub_values.shape == (20, 6)
    assert np.allclose(f.sub_values[:, -1], f.grid_values[1:], atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        KrotovConfig(lambda_a=0.0)
    with pytest.raises(ValueError):
        KrotovConfig(lambda_a=1.0, propagator="ito")
    assert KrotovConfig(1.0, propagator=ItoConfig()).uses_ito


# ---------------------------------------------------------------------------
# functionals


def test_state_functional_examples():
    tgt = ket(1, 3)
    f = StateToState(tgt)
    assert functional_value(f, tgt) == 0.0
    assert functional_value(f, ket(0, 3)) == 1.0
    assert np.allclose(costate_terminal(f, tgt)[:, 0], tgt)
    assert np.all(costate_terminal(f, ket(2, 3)) == 0)
    with pytest.raises(ValueError):
        f.value(np.zeros((3, 2)))


def test_gate_functional_examples():
    f = GateFunctional(CNOT_LEVELS, dim=6)
    exact = np.zeros((6, 4), dtype=complex)
    exact[:4] = CNOT_LEVELS
    assert f.value(exact) == pytest.approx(0.0, abs=1e-15)
    ident = np.eye(6, 4, dtype=complex)
    # 1 - tr(CNOT) / 4 with tr(CNOT) = 2 on the level basis used here
    assert f.value(ident) == pytest.approx(1.0 - np.trace(CNOT_LEVELS).real / 4)
    g = GateFunctional(np.eye(4), dim=5)
    assert np.allclose(g.costate(np.eye(5, 4)), np.eye(5, 4) / 4)
    with pytest.raises(ValueError):
        g.value(np.eye(5, 3))


def test_gate_functional_is_phase_sensitive():
    f = GateFunctional(np.eye(4), dim=4)
    assert f.value(np.eye(4)) == pytest.approx(0)
    assert f.value(1j * np.eye(4)) == pytest.approx(1)
    assert f.value(-np.eye(4)) == pytest.approx(2)


def test_functional_range_random_states():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = (rng.standard_normal(5) + 1j * rng.standard_normal(5) for _ in range(2))
        j = StateToState(a / np.linalg.norm(a)).value(b / np.linalg.norm(b))
        assert 0 <= j <= 1


# ---------------------------------------------------------------------------
# costate


def test_costate_norm_and_overlap():
    prob = _toy()
    cfg = KrotovConfig(1.0)
    fld = prob.guess_field()
    sweep = forward(prob, fld, cfg)
    chis, _ = backward_costate(prob, fld, cfg, sweep.finals)
    norms = np.linalg.norm(chis[:, :, 0], axis=1)
    assert np.max(np.abs(norms - norms[-1])) <= 1e-12
    from itoqoc.krotov import _pwc_forward
    psis = _pwc_forward(prob, fld, "chebyshev", store=True).stored
    overlap = np.einsum("nd,nd->n", chis[:, :, 0].conj(), psis[:, :, 0])
    assert np.max(np.abs(overlap - overlap[-1])) <= 1e-10


def test_costate_inverts_static_forward():
    h0 = np.diag([0.0, 1.0, 2.3]).astype(complex)
    h1 = np.zeros((3, 3), dtype=complex)
    rng = np.random.default_rng(1)
    chi_t = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    prob = ControlProblem(h0, h1, ket(0, 3), StateToState(chi_t / np.linalg.norm(chi_t)), 2.0, 50)
    fld = prob.guess_field()
    chis, _ = backward_costate(prob, fld, KrotovConfig(1.0), ket(0, 3))
    expected = scipy.linalg.expm(1j * h0 * 2.0) @ chis[-1]
    assert np.allclose(chis[0], expected, atol=1e-12)


def test_ito_costate_matches_pwc_on_fine_grid():
    prob = _toy(n_steps=400)
    fld = prob.guess_field(m_order=6)
    sweep = forward(prob, fld, KrotovConfig(1.0, propagator=ItoConfig(m_order=6)))
    chis_ito, _ = backward_costate(prob, fld, KrotovConfig(1.0, propagator=ItoConfig(m_order=6)),
                                   sweep.finals)
    chis_pwc, _ = backward_costate(prob, fld, KrotovConfig(1.0), sweep.finals)
    # node 0 of step n is t_n
    assert np.max(np.abs(chis_ito[:, 0] - chis_pwc[:-1])) <= 1e-5


# ---------------------------------------------------------------------------
# updates


def test_frozen_field_limit():
    for prop in ("pwc", ItoConfig(m_order=6)):
        prob = _toy()
        cfg = KrotovConfig(1e12, max_iter=1, propagator=prop)
        res = optimize(prob, cfg)
        assert res.records[1].field_change_norm <= 1e-9
        assert abs(res.j_t[1] - res.j_t[0]) <= 1e-9


def test_stop_tol_met_by_guess():
    prob = _toy()
    res = optimize(prob, KrotovConfig(1.0, stop_tol=1.0, max_iter=10))
    assert len(res.records) == 1
    assert np.array_equal(res.field.grid_values, prob.guess_field().grid_values)


def test_pwc_monotonic_toy():
    res = optimize(_toy(), KrotovConfig(2.0, max_iter=15))
    assert np.all(np.diff(res.j_t) <= 1e-12)
    assert res.j_t[-1] < res.j_t[0]


def test_lambda_scaling():
    prob = _toy()
    fld = prob.guess_field()
    changes = []
    for lam in (20.0, 10.0):
        res = optimize(prob, KrotovConfig(lam, max_iter=1), guess=fld)
        changes.append(res.records[1].field_change_norm)
    assert changes[1] / changes[0] == pytest.approx(2.0, rel=0.1)


def test_gradient_finite_difference():
    prob = _toy(n_steps=2000)
    cfg = KrotovConfig(1.0)
    fld = prob.guess_field()
    grad = gradient(prob, fld, cfg)
    direction = np.cos(2.0 * fld.times) + 0.5
    h = 1e-5
    j = []
    for sign in (1, -1):
        pert = fld.copy()
        pert.grid_values = fld.grid_values + sign * h * direction
        j.append(prob.functional.value(forward(prob, pert, cfg).finals))
    fd = (j[0] - j[1]) / (2 * h)
    w = np.full(fld.n_steps + 1, fld.dt)
    w[[0, -1]] *= 0.5
    predicted = np.sum(grad * direction * w)
    assert fd == pytest.approx(predicted, rel=1e-5)


def test_update_matches_gradient_direction():
    """First-order change of J_T equals -(S / lambda) |grad|^2 for a large lambda."""
    prob = _toy(n_steps=1000)
    cfg = KrotovConfig(1e4)
    fld = prob.guess_field()
    grad = gradient(prob, fld, cfg)
    s = ShapeFunction(prob.horizon)(fld.times)
    j0 = prob.functional.value(forward(prob, fld, cfg).finals)
    chis, _ = backward_costate(prob, fld, cfg, forward(prob, fld, cfg).finals)
    sweep = pwc_update(prob, fld, chis, cfg)
    predicted = -np.sum(s / cfg.lambda_a * grad ** 2 / 2) * fld.dt
    assert sweep.field.grid_values - fld.grid_values == pytest.approx(
        -s / (2 * cfg.lambda_a) * grad, abs=1e-3 * np.max(np.abs(s * grad)) / cfg.lambda_a)
    assert prob.functional.value(sweep.finals) - j0 == pytest.approx(predicted, rel=1e-2)


def test_ito_update_decreases_j_t():
    prob = _ho(n_steps=200)
    cfg = KrotovConfig(0.2, max_iter=5, propagator=ItoConfig(m_order=5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = optimize(prob, cfg)
    assert np.all(np.diff(res.j_t) <= 1e-12)
    assert res.j_t[-1] < 0.05 * res.j_t[0]


def test_one_shot_field_stalls():
    """Freezing the first field estimate on each interval stalls far above the joint loop."""
    out = {}
    for one_shot in (False, True):
        cfg = KrotovConfig(0.2, max_iter=21, one_shot_field=one_shot,
                           propagator=ItoConfig(m_order=5, guess="constant"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out[one_shot] = optimize(_ho(n_steps=200), cfg).j_t
    assert out[False][-1] < 1e-7
    assert out[True][-1] > 100 * out[False][-1]
    assert np.any(np.diff(out[True]) > 0)


def test_joint_loop_failure_reports_interval():
    prob = _ho(n_steps=20)
    cfg = KrotovConfig(1e-4, max_iter=1, propagator=ItoConfig(m_order=5, max_iter=3),
                       on_joint_failure="raise")
    with pytest.raises(JointLoopDiverged) as info:
        optimize(prob, cfg)
    assert info.value.interval >= 0 and info.value.n_iter == 3


def test_gate_problem_runs_and_improves():
    rng = np.random.default_rng(2)
    dim = 5
    h0 = np.diag(np.arange(dim) * 1.0 - 0.1 * np.arange(dim) ** 2).astype(complex)
    a = np.diag(np.sqrt(np.arange(1.0, dim)), 1)
    h1 = (a + a.T).astype(complex)
    gate = scipy.linalg.expm(-1j * (rng.standard_normal((4, 4)) * 0.1 + np.diag([0, 1, 2, 3])))
    prob = ControlProblem(h0, h1, np.eye(dim, 4), GateFunctional(gate, dim), 3.0, 300,
                          guess=lambda t: 0.2 * np.cos(t))
    res = optimize(prob, KrotovConfig(1.0, max_iter=5))
    assert np.all(np.diff(res.j_t) <= 1e-12)
    assert res.records[-1].matvec_count > res.records[0].matvec_count
