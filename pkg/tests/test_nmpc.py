from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import scipy.optimize

from gpmpc import gp
from gpmpc import quad_model as qm
from gpmpc.errors import InvalidInputError, NumericalError
from gpmpc.nmpc import (
    CorrectionSet,
    MpcConfig,
    MpcSolver,
    ReferenceWindow,
    condense_and_solve_qp,
    shift_trajectory,
    solve,
    stage_cost,
)
from gpmpc.qp import box_qp, kkt_residual
from gpmpc.reference import Lemniscate, sample_reference

P = qm.QuadParams()
CFG = MpcConfig()


def lemniscate_window(t0, cfg=CFG, scale=0.6, duration=20.0):
    times = t0 + cfg.dt * np.arange(cfg.N + 1)
    X, U = sample_reference(Lemniscate(duration, scale), P, times)
    return ReferenceWindow(X, U[:-1])


@pytest.fixture(scope="module")
def drag_model():
    rng = np.random.default_rng(21)
    axes = []
    for d in (0.30, 0.30, 0.15):
        v = rng.uniform(-8, 8, 200)
        a = -d * v + 0.01 * rng.standard_normal(200)
        axes.append(gp.gp_fit(v, a, gp.train_hyperparams(v, a)))
    return gp.ResidualModel(*axes)


# --- condensed QP ------------------------------------------------------------

def scalar_chain():
    a, b = 0.9, 0.5
    A = np.array([[[a]], [[a]]])
    B = np.array([[[b]], [[b]]])
    ex = np.array([[0.0], [0.4], [-0.3]])  # e_0 is irrelevant (dx_0 = 0)
    eu = np.array([[0.2], [-0.1]])
    wx = np.array([[1.0], [2.0], [3.0]])
    wu = np.array([[0.5], [0.5]])
    return a, b, A, B, ex, eu, wx, wu


def test_scalar_chain_matches_hand_solved_normal_equations():
    a, b, A, B, ex, eu, wx, wu = scalar_chain()
    w1, w2, r = 2.0, 3.0, 0.5
    e1, e2, r0, r1 = 0.4, -0.3, 0.2, -0.1
    # dx1 = b du0, dx2 = a b du0 + b du1; set the gradient of the cost to zero
    h11 = w1 * b * b + w2 * a * a * b * b + r
    h12 = w2 * a * b * b
    h22 = w2 * b * b + r
    g1 = w1 * b * e1 + w2 * a * b * e2 + r * r0
    g2 = w2 * b * e2 + r * r1
    det = h11 * h22 - h12 * h12
    du0 = -(h22 * g1 - h12 * g2) / det
    du1 = -(h11 * g2 - h12 * g1) / det
    res = condense_and_solve_qp(A, B, ex, eu, wx, wu, np.full((2, 1), -1e6), np.full((2, 1), 1e6), tol=1e-12)
    np.testing.assert_allclose(res.x.ravel(), [du0, du1], atol=1e-10)


def test_scalar_chain_matches_least_squares_route():
    a, b, A, B, ex, eu, wx, wu = scalar_chain()
    # same problem as a stacked weighted least-squares system, solved by scipy
    rows = np.array([
        [np.sqrt(2.0) * b, 0.0],
        [np.sqrt(3.0) * a * b, np.sqrt(3.0) * b],
        [np.sqrt(0.5), 0.0],
        [0.0, np.sqrt(0.5)],
    ])
    rhs = -np.array([np.sqrt(2.0) * 0.4, np.sqrt(3.0) * -0.3, np.sqrt(0.5) * 0.2, np.sqrt(0.5) * -0.1])
    lsq = scipy.optimize.lsq_linear(rows, rhs, tol=1e-14)
    res = condense_and_solve_qp(A, B, ex, eu, wx, wu, np.full((2, 1), -1e6), np.full((2, 1), 1e6), tol=1e-12)
    np.testing.assert_allclose(res.x.ravel(), lsq.x, atol=1e-10)


def test_inactive_bounds_do_not_change_solution():
    _, _, A, B, ex, eu, wx, wu = scalar_chain()
    free = condense_and_solve_qp(A, B, ex, eu, wx, wu, np.full((2, 1), -1e9), np.full((2, 1), 1e9))
    boxed = condense_and_solve_qp(A, B, ex, eu, wx, wu, np.full((2, 1), -5.0), np.full((2, 1), 5.0))
    np.testing.assert_array_equal(free.x, boxed.x)


def test_extreme_gradient_drives_solution_to_bounds():
    _, _, A, B, ex, eu, wx, wu = scalar_chain()
    res = condense_and_solve_qp(A, B, ex * 1e6, eu * 1e6, wx, wu, np.full((2, 1), -1.0), np.full((2, 1), 1.0))
    assert set(np.abs(res.x.ravel())) == {1.0}
    assert res.converged and res.kkt_residual <= 1e-8


def test_box_qp_kkt_and_complementarity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        M = rng.normal(size=(12, 12))
        H = M @ M.T + 0.1 * np.eye(12)
        g = 5 * rng.normal(size=12)
        lb, ub = -rng.uniform(0.1, 1, 12), rng.uniform(0.1, 1, 12)
        res = box_qp(H, g, lb, ub)
        assert res.converged and res.kkt_residual <= 1e-8
        grad = H @ res.x + g
        at_lb, at_ub = np.isclose(res.x, lb), np.isclose(res.x, ub)
        assert np.all(grad[at_lb] >= -1e-8) and np.all(grad[at_ub] <= 1e-8)
        inner = ~(at_lb | at_ub)
        assert np.all(np.abs(grad[inner]) <= 1e-7)
        assert kkt_residual(H, g, lb, ub, res.x) == res.kkt_residual


def test_box_qp_rejects_indefinite_hessian():
    H = np.diag([1.0, -1.0])
    with pytest.raises(NumericalError):
        box_qp(H, np.array([1.0, 1.0]), np.full(2, -1e9), np.full(2, 1e9))


# --- stage cost --------------------------------------------------------------

def test_stage_cost_zero_error():
    x = qm.State.hover([1, 2, 3]).vector
    assert stage_cost(x, np.ones(4), x, np.ones(4), CFG) == 0.0


def test_stage_cost_unit_quadratic():
    cfg = MpcConfig(Q=(1.0,) * 13, R=(0.0,) * 4)
    x = qm.State.hover().vector
    xr = x.copy()
    xr[0] += 1.0
    assert stage_cost(x, np.ones(4), xr, np.zeros(4), cfg) == 1.0


def test_stage_cost_double_cover():
    q = qm.quat_from_axis_angle([0.3, -1, 0.2], 0.8)
    x = np.concatenate([np.zeros(3), q, np.zeros(6)])
    xr = np.concatenate([np.zeros(3), -q, np.zeros(6)])
    assert stage_cost(x, None, xr, None, CFG) == 0.0


# --- solve -------------------------------------------------------------------

def test_hover_solution():
    ref = ReferenceWindow.hover(CFG.N, P, [0, 0, 2.5])
    res = solve(ref.states[0], ref, CFG, P)
    np.testing.assert_allclose(res.inputs, P.mass * 9.81 / 4, atol=1e-6)
    np.testing.assert_allclose(res.states, ref.states, atol=1e-6)
    assert res.status == "ok"
    assert np.array_equal(res.states[0], ref.states[0])


def test_unreachable_climb_saturates_inputs():
    ref = ReferenceWindow.hover(CFG.N, P, [0, 0, 0])
    states = ref.states.copy()
    states[:, 2] = 200.0
    states[:, 9] = 100.0
    ref = ReferenceWindow(states, np.full((CFG.N, 4), P.u_max))
    res = solve(qm.State.hover().vector, ref, CFG, P)
    np.testing.assert_array_equal(res.inputs, P.u_max)
    assert res.status == "ok"


def test_bias_correction_cancels_plant_bias():
    bias = np.array([0.5, 0.0, 0.0])
    ref = ReferenceWindow.hover(CFG.N, P, [0, 0, 1])
    x0 = ref.states[0]
    corr = CorrectionSet(np.tile(bias, (CFG.N, 1)), np.tile([1.0, 0, 0, 0], (CFG.N, 1)))
    res = solve(x0, ref, replace(CFG, mode="precomputed"), P, corr=corr)
    # "plant": the same rigid body with the bias, integrated at 1 kHz
    x = x0.copy()
    for _ in range(int(round(CFG.dt / 1e-3))):
        x = qm.rk4_step(x, res.u0, 1e-3, P, qm.Correction(bias), [1.0, 0, 0, 0])
    assert np.linalg.norm(res.states[1] - x) <= 1e-6
    nominal = solve(x0, ref, CFG, P)
    assert np.linalg.norm(nominal.states[1] - x) > 1e-3


def test_zero_corrections_match_nominal_bitwise():
    ref = lemniscate_window(3.0)
    x0 = ref.states[0] + np.r_[0.05, -0.02, 0.01, np.zeros(10)]
    nom = solve(x0, ref, CFG, P)
    pre = solve(x0, ref, replace(CFG, mode="precomputed"), P, corr=CorrectionSet.zeros(CFG.N))
    assert np.array_equal(nom.inputs, pre.inputs)
    assert np.array_equal(nom.states, pre.states)


def test_repeated_solves_do_not_increase_cost():
    cfg = replace(CFG, warm_shift=0.0)
    ref = lemniscate_window(6.0, scale=1.0)
    x0 = ref.states[0] + np.r_[0.3, -0.2, 0.1, np.zeros(4), 0.5, 0.0, 0.0, np.zeros(3)]
    solver = MpcSolver(P, cfg)
    costs = [solver.step(x0, ref).cost for _ in range(15)]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_inputs_within_bounds_on_random_problems():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        ref = ReferenceWindow.hover(CFG.N, P, rng.uniform(-2, 2, 3))
        states = ref.states.copy()
        states[:, :3] += rng.normal(scale=2.0, size=3)
        states[:, 7:10] += rng.normal(scale=2.0, size=3)
        ref = ReferenceWindow(states, ref.inputs)
        x0 = np.concatenate(
            [rng.uniform(-2, 2, 3), qm.quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 1.0)),
             rng.normal(size=3), rng.normal(scale=0.5, size=3)]
        )
        res = solve(x0, ref, CFG, P)
        worst = max(worst, float(np.max(res.inputs - P.u_max)), float(np.max(P.u_min - res.inputs)))
        assert np.array_equal(res.states[0], x0)
    assert worst <= 1e-9


def test_direct_and_precomputed_agree_on_reference(drag_model):
    ref = lemniscate_window(8.0, scale=0.8)
    x0 = ref.states[0]
    a_body = np.empty((CFG.N, 3))
    quats = ref.states[:-1, 3:7]
    for k in range(CFG.N):
        Rk = qm.quat_to_rotmat(quats[k])
        a_body[k] = drag_model.mean(Rk.T @ ref.states[k, 7:10])
    pre = solve(x0, ref, replace(CFG, mode="precomputed"), P, corr=CorrectionSet(a_body, quats))
    direct = solve(x0, ref, replace(CFG, mode="direct"), P, residual=drag_model)
    assert np.max(np.abs(pre.u0 - direct.u0)) <= 0.05 * (P.u_max - P.u_min)


def test_precomputed_node_zero_is_predicted_online(drag_model):
    ref = lemniscate_window(8.0, scale=0.8)
    x0 = ref.states[0].copy()
    x0[7:10] += [0.5, -0.3, 0.2]
    stale = CorrectionSet.zeros(CFG.N)
    res = solve(x0, ref, replace(CFG, mode="precomputed"), P, corr=stale, residual=drag_model)
    R0 = qm.quat_to_rotmat(x0[3:7])
    np.testing.assert_allclose(res.corrections_world[0], R0 @ drag_model.mean(R0.T @ x0[7:10]), atol=1e-12)
    np.testing.assert_array_equal(res.corrections_world[1:], 0.0)


def test_warm_start_does_not_raise_initial_kkt():
    cfg = replace(CFG, warm_shift=0.2)
    traj = Lemniscate(8.0, 0.5)
    grid = np.arange(400 + 51) * 0.02
    X, U = sample_reference(traj, P, grid)
    solver = MpcSolver(P, cfg)
    x = X[0].copy()
    warm_kkt, cold_kkt = [], []
    for j in range(400):
        window = ReferenceWindow(X[j : j + 51 : 5], U[j : j + 50 : 5])
        cold = solve(x, window, cfg, P)
        warm = solver.step(x, window)
        cold_kkt.append(cold.kkt_initial)
        warm_kkt.append(warm.kkt_initial)
        for _ in range(20):
            x = qm.rk4_step(x, warm.u0, 1e-3, P)
    assert np.median(warm_kkt) <= np.median(cold_kkt)


def test_iteration_cap_reports_degraded_status():
    cfg = replace(CFG, qp_max_iters=1)
    ref = lemniscate_window(6.0, scale=1.0)
    x0 = ref.states[0] + np.r_[2.0, -2.0, 1.0, np.zeros(10)]
    res = solve(x0, ref, cfg, P)
    assert res.status == "degraded"
    assert np.all(res.inputs >= P.u_min) and np.all(res.inputs <= P.u_max)


def test_nan_state_is_a_hard_error():
    ref = ReferenceWindow.hover(CFG.N, P)
    x0 = ref.states[0].copy()
    x0[0] = np.nan
    with pytest.raises(NumericalError):
        solve(x0, ref, CFG, P)


def test_mode_requirements():
    ref = ReferenceWindow.hover(CFG.N, P)
    with pytest.raises(InvalidInputError):
        solve(ref.states[0], ref, replace(CFG, mode="precomputed"), P)
    with pytest.raises(InvalidInputError):
        solve(ref.states[0], ref, replace(CFG, mode="direct"), P)
    with pytest.raises(InvalidInputError):
        solve(ref.states[0], ref, replace(CFG, mode="precomputed"), P, corr=CorrectionSet.zeros(3))


@pytest.mark.parametrize(
    "kwargs",
    [{"horizon_T": 0.0}, {"N": 1}, {"mode": "fancy"}, {"R": (-1.0,) * 4}, {"Q": (0.0,) * 13}],
)
def test_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        MpcConfig(**kwargs)


def test_config_defaults_and_round_trip():
    assert CFG.dt == pytest.approx(0.1)
    np.testing.assert_allclose(CFG.Q_T, 10 * np.asarray(CFG.Q))
    assert MpcConfig.from_dict(CFG.to_dict()) == CFG


def test_shift_trajectory():
    traj = np.arange(5.0)[:, None]
    np.testing.assert_array_equal(shift_trajectory(traj, 1.0).ravel(), [1, 2, 3, 4, 4])
    np.testing.assert_allclose(shift_trajectory(traj, 0.2).ravel(), [0.2, 1.2, 2.2, 3.2, 4.0])
    np.testing.assert_array_equal(shift_trajectory(traj, 0.0), traj)
