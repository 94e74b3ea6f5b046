"""Rigid-body quadrotor model.

State vectors are laid out as ``[p (3), q (4), v (3), w (3)]`` with the
quaternion scalar-first and rotating body vectors into the world frame.
Position and velocity are world-frame, body rates are body-frame.

The vector-level functions (``derivative``, ``step_vector``,
``step_with_sensitivities``) are what the solver and simulator call in their
inner loops; the :class:`State` wrapper is for callers who want named fields.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gpmpc.errors import InvalidInputError

NX = 13
NU = 4
QUAT_TOL = 1e-9

P_SLICE = slice(0, 3)
Q_SLICE = slice(3, 7)
V_SLICE = slice(7, 10)
W_SLICE = slice(10, 13)

Vector = NDArray[np.float64]


@dataclass(frozen=True)
class QuadParams:
    """Vehicle constants. Defaults describe a Hummingbird-class airframe."""

    mass: float = 0.68
    inertia_diag: tuple[float, float, float] = (0.007, 0.007, 0.012)
    d_x: float = 0.12
    d_y: float = 0.12
    c_tau: float = 0.016
    gravity: float = -9.81
    u_min: float = 0.0
    u_max: float = 4.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "inertia_diag", tuple(float(j) for j in self.inertia_diag))
        if not self.mass > 0:
            raise InvalidInputError(f"mass must be positive, got {self.mass}")
        if len(self.inertia_diag) != 3 or min(self.inertia_diag) <= 0:
            raise InvalidInputError(f"inertia entries must be positive, got {self.inertia_diag}")
        if min(self.d_x, self.d_y, self.c_tau) <= 0:
            raise InvalidInputError("d_x, d_y and c_tau must be positive")
        if not 0 <= self.u_min < self.u_max:
            raise InvalidInputError(f"need 0 <= u_min < u_max, got {self.u_min}, {self.u_max}")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return self.mass * abs(self.gravity) / 4.0

    @property
    def gravity_vector(self) -> Vector:
        return np.array([0.0, 0.0, self.gravity])

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["inertia_diag"] = list(self.inertia_diag)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> QuadParams:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown quad_params fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class State:
    """Named view of the 13-dimensional state."""

    p: Vector
    q: Vector
    v: Vector
    w: Vector

    def __post_init__(self) -> None:
        for name, size in (("p", 3), ("q", 4), ("v", 3), ("w", 3)):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(size)
            object.__setattr__(self, name, arr)

    @property
    def vector(self) -> Vector:
        return np.concatenate([self.p, self.q, self.v, self.w])

    @classmethod
    def from_vector(cls, x: ArrayLike) -> State:
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise InvalidInputError(f"state vector must have shape (13,), got {x.shape}")
        return cls(x[P_SLICE], x[Q_SLICE], x[V_SLICE], x[W_SLICE])

    @classmethod
    def hover(cls, p: Sequence[float] = (0.0, 0.0, 0.0)) -> State:
        return cls(np.asarray(p, dtype=float), np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class Correction:
    """Acceleration error expressed in the body frame."""

    a_body: Vector = field(default_factory=lambda: np.zeros(3))
    frame: str = "body"

    def __post_init__(self) -> None:
        a = np.asarray(self.a_body, dtype=float).reshape(3)
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"correction must be finite, got {a}")
        object.__setattr__(self, "a_body", a)


def _as_vector(x: State | ArrayLike) -> Vector:
    if isinstance(x, State):
        return x.vector
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# quaternion algebra


def _check_unit(q: Vector) -> None:
    if abs(math.sqrt(q @ q) - 1.0) > QUAT_TOL:
        raise InvalidInputError(f"quaternion is not unit norm (|q| = {np.linalg.norm(q)!r})")


def quat_multiply(a: ArrayLike, b: ArrayLike) -> Vector:
    aw, ax, ay, az = np.asarray(a, dtype=float)
    bw, bx, by, bz = np.asarray(b, dtype=float)
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: ArrayLike) -> Vector:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: ArrayLike) -> Vector:
    q = np.asarray(q, dtype=float)
    return q / math.sqrt(q @ q)


def quat_to_rotmat(q: ArrayLike) -> NDArray[np.float64]:
    """Rotation matrix R with ``R @ v == quat_rotate(q, v)`` for unit q."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: ArrayLike) -> Vector:
    """Scalar-first unit quaternion of a rotation matrix, with q_w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_from_axis_angle(axis: ArrayLike, angle: float) -> Vector:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_rotate(q: ArrayLike, v: ArrayLike) -> Vector:
    """Rotate ``v`` by unit quaternion ``q`` (``q v q̄``)."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    v = np.asarray(v, dtype=float)
    qv = q[1:]
    t = 2.0 * np.cross(qv, v)
    return v + q[0] * t + np.cross(qv, t)


# ---------------------------------------------------------------------------
# dynamics


def mixing_matrix(params: QuadParams) -> NDArray[np.float64]:
    """4x4 map from rotor thrusts to (collective thrust, tau_x, tau_y, tau_z)."""
    dx, dy, ct = params.d_x, params.d_y, params.c_tau
    return np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [-dy, -dy, dy, dy],
            [-dx, dx, dx, -dx],
            [-ct, ct, -ct, ct],
        ]
    )


def mix_thrusts(u: ArrayLike, params: QuadParams) -> tuple[Vector, Vector]:
    """Collective thrust vector and body torque for rotor thrusts ``u``."""
    wrench = mixing_matrix(params) @ np.asarray(u, dtype=float)
    return np.array([0.0, 0.0, wrench[0]]), wrench[1:]


def derivative(
    x: Vector,
    u: Vector,
    params: QuadParams,
    a_world: Vector | None = None,
    drag: Vector | None = None,
) -> Vector:
    """Time derivative of the state vector.

    ``a_world`` is a constant extra world-frame acceleration. ``drag`` holds
    linear body-frame drag coefficients; it is only used by the simulated
    plant and never by the controller's model.
    """
    qw, qx, qy, qz = x[3], x[4], x[5], x[6]
    wx, wy, wz = x[10], x[11], x[12]
    u0, u1, u2, u3 = u[0], u[1], u[2], u[3]
    jx, jy, jz = params.inertia_diag
    thrust = (u0 + u1 + u2 + u3) / params.mass

    out = np.empty(NX)
    out[0:3] = x[7:10]
    out[3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[4] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[5] = 0.5 * (qw * wy + qz * wx - qx * wz)
    out[6] = 0.5 * (qw * wz + qx * wy - qy * wx)
    # homogeneous form of q (0,0,1) q̄ so non-unit intermediate RK stages stay smooth
    out[7] = thrust * 2.0 * (qx * qz + qw * qy)
    out[8] = thrust * 2.0 * (qy * qz - qw * qx)
    out[9] = thrust * (qw * qw - qx * qx - qy * qy + qz * qz) + params.gravity
    tau_x = params.d_y * (-u0 - u1 + u2 + u3)
    tau_y = params.d_x * (-u0 + u1 + u2 - u3)
    tau_z = params.c_tau * (-u0 + u1 - u2 + u3)
    out[10] = (tau_x - (wy * jz * wz - wz * jy * wy)) / jx
    out[11] = (tau_y - (wz * jx * wx - wx * jz * wz)) / jy
    out[12] = (tau_z - (wx * jy * wy - wy * jx * wx)) / jz
    if a_world is not None:
        out[7:10] += a_world
    if drag is not None:
        R = quat_to_rotmat(x[3:7] / math.sqrt(x[3:7] @ x[3:7]))
        out[7:10] -= R @ (drag * (R.T @ x[7:10]))
    return out


def derivative_jacobians(x: Vector, u: Vector, params: QuadParams) -> tuple[NDArray, NDArray]:
    """Partial derivatives of :func:`derivative` (no drag) w.r.t. x and u.

    The second matrix has 7 columns: the four thrusts followed by the three
    components of the additive world acceleration.
    """
    qw, qx, qy, qz = x[3], x[4], x[5], x[6]
    wx, wy, wz = x[10], x[11], x[12]
    jx, jy, jz = params.inertia_diag
    m = params.mass
    thrust = (u[0] + u[1] + u[2] + u[3]) / m

    F = np.zeros((NX, NX))
    F[0, 7] = F[1, 8] = F[2, 9] = 1.0
    F[3:7, 3:7] = 0.5 * np.array(
        [
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ]
    )
    F[3:7, 10:13] = 0.5 * np.array(
        [
            [-qx, -qy, -qz],
            [qw, -qz, qy],
            [qz, qw, -qx],
            [-qy, qx, qw],
        ]
    )
    F[7:10, 3:7] = (2.0 * thrust) * np.array(
        [
            [qy, qz, qw, qx],
            [-qx, -qw, qz, qy],
            [qw, -qx, -qy, qz],
        ]
    )
    # d/dw of -(w x Jw) / J
    F[10, 11] = -(jz - jy) * wz / jx
    F[10, 12] = -(jz - jy) * wy / jx
    F[11, 10] = -(jx - jz) * wz / jy
    F[11, 12] = -(jx - jz) * wx / jy
    F[12, 10] = -(jy - jx) * wy / jz
    F[12, 11] = -(jy - jx) * wx / jz

    G = np.zeros((NX, NU + 3))
    col = np.array([2.0 * (qx * qz + qw * qy), 2.0 * (qy * qz - qw * qx), qw * qw - qx * qx - qy * qy + qz * qz])
    G[7:10, 0:4] = (col / m)[:, None]
    G[10:13, 0:4] = mixing_matrix(params)[1:] / np.array([jx, jy, jz])[:, None]
    G[7, 4] = G[8, 5] = G[9, 6] = 1.0
    return F, G


def continuous_dynamics(x: State | ArrayLike, u: ArrayLike, params: QuadParams) -> Vector:
    """State derivative of the nominal model."""
    return derivative(_as_vector(x), np.asarray(u, dtype=float), params)


def _normalize_quat_inplace(x: Vector) -> float:
    n = math.sqrt(x[3:7] @ x[3:7])
    x[3:7] /= n
    return n


def step_vector(
    x: Vector,
    u: Vector,
    dt: float,
    params: QuadParams,
    a_world: Vector | None = None,
    drag: Vector | None = None,
) -> Vector:
    """One classical RK4 step on raw vectors, quaternion re-normalised."""
    h = dt
    k1 = derivative(x, u, params, a_world, drag)
    k2 = derivative(x + 0.5 * h * k1, u, params, a_world, drag)
    k3 = derivative(x + 0.5 * h * k2, u, params, a_world, drag)
    k4 = derivative(x + h * k3, u, params, a_world, drag)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _normalize_quat_inplace(out)
    return out


def step_with_sensitivities(
    x: Vector,
    u: Vector,
    dt: float,
    params: QuadParams,
    a_world: Vector | None = None,
) -> tuple[Vector, NDArray, NDArray]:
    """RK4 step plus exact derivatives of the step map.

    Returns ``(x_next, A, B)`` where ``A`` is 13x13 and ``B`` is 13x7 (thrusts
    then additive world acceleration).
    """
    h = dt
    nz = NX + NU + 3
    S0 = np.zeros((NX, nz))
    S0[:, :NX] = np.eye(NX)

    def stage(xs: Vector, Ss: NDArray) -> tuple[Vector, NDArray]:
        F, G = derivative_jacobians(xs, u, params)
        K = F @ Ss
        K[:, NX:] += G
        return derivative(xs, u, params, a_world), K

    k1, K1 = stage(x, S0)
    k2, K2 = stage(x + 0.5 * h * k1, S0 + 0.5 * h * K1)
    k3, K3 = stage(x + 0.5 * h * k2, S0 + 0.5 * h * K2)
    k4, K4 = stage(x + h * k3, S0 + h * K3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    S = S0 + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)

    n = _normalize_quat_inplace(out)
    qn = out[3:7]
    S[3:7] = ((np.eye(4) - np.outer(qn, qn)) / n) @ S[3:7]
    return out, S[:, :NX], S[:, NX:]


def correction_world(corr: Correction | None, q_corr: ArrayLike | None) -> Vector | None:
    """World-frame acceleration of a body-frame correction."""
    if corr is None:
        return None
    q = np.array([1.0, 0.0, 0.0, 0.0]) if q_corr is None else quat_normalize(q_corr)
    return quat_rotate(q, corr.a_body)


def rk4_step(
    x: State | ArrayLike,
    u: ArrayLike,
    dt: float,
    params: QuadParams,
    corr: Correction | None = None,
    q_corr: ArrayLike | None = None,
) -> State | Vector:
    """Advance the nominal model by ``dt``.

    A correction adds ``quat_rotate(q_corr, corr.a_body)`` to the velocity
    derivative for the whole step. Returns the same kind of object as ``x``.
    """
    if dt < 0:
        raise InvalidInputError(f"dt must be non-negative, got {dt}")
    xv = _as_vector(x)
    if isinstance(x, State):
        _check_unit(x.q)
    out = step_vector(xv, np.asarray(u, dtype=float), dt, params, correction_world(corr, q_corr))
    return State.from_vector(out) if isinstance(x, State) else out


def discrete_jacobians(
    x: State | ArrayLike,
    u: ArrayLike,
    dt: float,
    params: QuadParams,
    corr: Correction | None = None,
    q_corr: ArrayLike | None = None,
) -> tuple[NDArray, NDArray]:
    """A = d x_next / d x and B = d x_next / d u of :func:`rk4_step`."""
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    _, A, B = step_with_sensitivities(
        _as_vector(x).copy(), np.asarray(u, dtype=float), dt, params, correction_world(corr, q_corr)
    )
    return A, B[:, :NU]
