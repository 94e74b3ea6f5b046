from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmpc import quad_model as qm
from gpmpc.errors import InvalidInputError

P = qm.QuadParams()


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_state(rng):
    return np.concatenate(
        [rng.uniform(-3, 3, 3), random_unit_quat(rng), rng.uniform(-5, 5, 3), rng.uniform(-3, 3, 3)]
    )


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3
).map(lambda q: np.asarray(q) / np.linalg.norm(q))
vec3 = st.lists(st.floats(-100, 100), min_size=3, max_size=3).map(np.asarray)


# --- quaternions -----------------------------------------------------------

def test_rotate_identity():
    np.testing.assert_array_equal(qm.quat_rotate([1, 0, 0, 0], [1, 2, 3]), [1, 2, 3])


def test_rotate_quarter_turn_about_z():
    h = math.sqrt(0.5)
    np.testing.assert_allclose(qm.quat_rotate([h, 0, 0, h], [1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_rotate_rejects_non_unit_quaternion():
    with pytest.raises(InvalidInputError):
        qm.quat_rotate([1.0, 1e-4, 0, 0], [1, 0, 0])


@given(unit_quats, vec3)
def test_rotate_is_isometry(q, v):
    assert abs(np.linalg.norm(qm.quat_rotate(q, v)) - np.linalg.norm(v)) <= 1e-12 * max(1.0, np.linalg.norm(v))


@given(unit_quats, vec3)
def test_conjugate_rotation_inverts(q, v):
    back = qm.quat_rotate(qm.quat_conjugate(q), qm.quat_rotate(q, v))
    np.testing.assert_allclose(back, v, atol=1e-12 * max(1.0, np.linalg.norm(v)))


@given(unit_quats)
def test_rotmat_round_trip(q):
    r = qm.rotmat_to_quat(qm.quat_to_rotmat(q))
    assert min(np.abs(r - q).max(), np.abs(r + q).max()) < 1e-12


def test_rotmat_matches_sandwich_product():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q, v = random_unit_quat(rng), rng.normal(size=3)
        full = qm.quat_multiply(qm.quat_multiply(q, np.r_[0.0, v]), qm.quat_conjugate(q))
        np.testing.assert_allclose(qm.quat_to_rotmat(q) @ v, full[1:], atol=1e-14)


# --- mixing ----------------------------------------------------------------

def test_mix_zero_input():
    T, tau = qm.mix_thrusts([0, 0, 0, 0], P)
    np.testing.assert_array_equal(T, 0)
    np.testing.assert_array_equal(tau, 0)


def test_mix_symmetric_thrusts_cancel_torques():
    T, tau = qm.mix_thrusts([1, 1, 1, 1], P)
    np.testing.assert_array_equal(T, [0, 0, 4])
    np.testing.assert_allclose(tau, 0, atol=1e-16)


def test_mix_single_rotor_sign_pattern():
    params = qm.QuadParams(d_x=0.1, d_y=0.1, c_tau=0.01)
    T, tau = qm.mix_thrusts([0, 0, 1, 0], params)
    np.testing.assert_array_equal(T, [0, 0, 1])
    np.testing.assert_allclose(tau, [0.1, 0.1, -0.01], atol=1e-16)


@given(
    st.lists(st.floats(0, 5), min_size=4, max_size=4),
    st.lists(st.floats(0, 5), min_size=4, max_size=4),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_mix_is_linear(u1, u2, a, b):
    u1, u2 = np.asarray(u1), np.asarray(u2)
    T, tau = qm.mix_thrusts(a * u1 + b * u2, P)
    T1, tau1 = qm.mix_thrusts(u1, P)
    T2, tau2 = qm.mix_thrusts(u2, P)
    # exact up to floating-point rounding of the 4-term sums
    np.testing.assert_allclose(T, a * T1 + b * T2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(tau, a * tau1 + b * tau2, rtol=0, atol=1e-12)


# --- continuous dynamics ---------------------------------------------------

def test_hover_is_equilibrium():
    u = np.full(4, P.mass * 9.81 / 4)
    np.testing.assert_allclose(qm.continuous_dynamics(qm.State.hover(), u, P), 0, atol=1e-14)


def test_free_fall():
    xdot = qm.continuous_dynamics(qm.State.hover(), np.zeros(4), P)
    np.testing.assert_allclose(xdot[qm.V_SLICE], [0, 0, -9.81])


def test_quaternion_rate_from_yaw_rate():
    x = qm.State(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), np.array([0.0, 0, 1]))
    xdot = qm.continuous_dynamics(x, np.full(4, P.hover_thrust), P)
    np.testing.assert_allclose(xdot[qm.Q_SLICE], [0, 0, 0, 0.5])


def test_thrust_is_divided_by_mass():
    x = qm.State.hover()
    xdot = qm.continuous_dynamics(x, np.full(4, 1.0), P)
    assert xdot[9] == pytest.approx(4.0 / P.mass - 9.81, abs=1e-12)


# --- rk4 -------------------------------------------------------------------

def test_zero_step_is_identity():
    rng = np.random.default_rng(0)
    x = random_state(rng)
    np.testing.assert_array_equal(qm.rk4_step(x, np.ones(4), 0.0, P), x)


def test_negative_step_rejected():
    with pytest.raises(InvalidInputError):
        qm.rk4_step(qm.State.hover(), np.ones(4), -0.01, P)


def test_free_fall_step_is_exact():
    x = qm.rk4_step(qm.State.hover(), np.zeros(4), 0.1, P)
    assert x.v[2] == pytest.approx(-0.981, abs=1e-12)
    assert x.p[2] == pytest.approx(-0.04905, abs=1e-12)


def test_correction_adds_velocity_increment():
    x = qm.rk4_step(
        qm.State.hover(), np.full(4, P.hover_thrust), 0.1, P,
        corr=qm.Correction([1.0, 0, 0]), q_corr=[1.0, 0, 0, 0],
    )
    assert x.v[0] == pytest.approx(0.1, abs=1e-12)


def test_rk4_returns_state_for_state_input():
    assert isinstance(qm.rk4_step(qm.State.hover(), np.ones(4), 0.01, P), qm.State)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.2))
def test_rk4_keeps_quaternion_unit(seed, dt):
    rng = np.random.default_rng(seed)
    x = qm.rk4_step(random_state(rng), rng.uniform(0, 4.5, 4), dt, P)
    assert abs(np.linalg.norm(x[qm.Q_SLICE]) - 1) <= 1e-9


def test_rk4_fourth_order_convergence():
    # smooth manoeuvre: tilted, spinning, asymmetric thrusts
    x0 = np.concatenate([[0, 0, 1], qm.quat_from_axis_angle([1, 1, 0], 0.4), [1, -0.5, 0.2], [0.5, -0.3, 0.8]])
    u = np.array([1.5, 1.8, 1.6, 1.9])
    horizon = 0.4

    def integrate(dt):
        x = x0.copy()
        for _ in range(int(round(horizon / dt))):
            x = qm.rk4_step(x, u, dt, P)
        return x

    dts = [0.1, 0.05, 0.025, 0.0125]
    truth = integrate(dts[-1] / 100)
    errs = [np.linalg.norm(integrate(dt) - truth) for dt in dts]
    for coarse, fine in zip(errs, errs[1:]):
        assert coarse / fine >= 2**3
    order = math.log(errs[0] / errs[-1]) / math.log(dts[0] / dts[-1])
    assert order >= 3.5


# --- jacobians -------------------------------------------------------------

def fd_jacobians(x, u, dt, corr=None, q_corr=None, eps=1e-6):
    A = np.empty((13, 13))
    B = np.empty((13, 4))
    for i in range(13):
        e = np.zeros(13)
        e[i] = eps
        A[:, i] = (qm.rk4_step(x + e, u, dt, P, corr, q_corr) - qm.rk4_step(x - e, u, dt, P, corr, q_corr)) / (2 * eps)
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        B[:, i] = (qm.rk4_step(x, u + e, dt, P, corr, q_corr) - qm.rk4_step(x, u - e, dt, P, corr, q_corr)) / (2 * eps)
    return A, B


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-3))


def test_jacobians_at_hover_match_finite_differences():
    x = qm.State.hover().vector
    u = np.full(4, P.hover_thrust)
    A, B = qm.discrete_jacobians(x, u, 0.05, P)
    Afd, Bfd = fd_jacobians(x, u, 0.05)
    assert rel_err(A, Afd) <= 1e-4
    assert rel_err(B, Bfd) <= 1e-4
    np.testing.assert_allclose(A[qm.P_SLICE, qm.V_SLICE], 0.05 * np.eye(3), atol=1e-12)


def test_jacobians_match_finite_differences_at_random_points():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        x = random_state(rng)
        u = rng.uniform(0, 4.5, 4)
        dt = rng.uniform(0.01, 0.1)
        A, B = qm.discrete_jacobians(x, u, dt, P)
        Afd, Bfd = fd_jacobians(x, u, dt)
        worst = max(worst, rel_err(A, Afd), rel_err(B, Bfd))
    assert worst <= 1e-4


def test_constant_correction_leaves_state_jacobian_unchanged():
    rng = np.random.default_rng(7)
    x, u = random_state(rng), rng.uniform(0, 4.5, 4)
    qc = random_unit_quat(rng)
    A0, B0 = qm.discrete_jacobians(x, u, 0.05, P)
    A1, B1 = qm.discrete_jacobians(x, u, 0.05, P, qm.Correction([0.3, -1.0, 0.5]), qc)
    np.testing.assert_allclose(A1, A0, atol=1e-12)
    np.testing.assert_allclose(B1, B0, atol=1e-12)


def test_jacobian_rejects_nonpositive_dt():
    with pytest.raises(InvalidInputError):
        qm.discrete_jacobians(qm.State.hover(), np.ones(4), 0.0, P)


# --- parameter validation ----------------------------------------------------

@pytest.mark.parametrize(
    "kwargs",
    [{"mass": 0.0}, {"inertia_diag": (0.007, 0.0, 0.01)}, {"d_x": -0.1}, {"c_tau": 0.0}, {"u_min": 5.0}, {"u_min": -1.0}],
)
def test_invalid_params_rejected(kwargs):
    with pytest.raises(InvalidInputError):
        qm.QuadParams(**kwargs)


def test_params_dict_round_trip():
    assert qm.QuadParams.from_dict(P.to_dict()) == P
