"""Lemniscate reference trajectory with a ramped phase rate.

The figure-eight is ``x = 5 cos(phi) - 5``, ``y = 5 sin(phi) cos(phi)``,
``z = 2.5`` with ``phi = sqrt(2) * speed_scale * s(t)``. The phase rate
``ds/dt`` ramps linearly from 0 to 1 over the first quarter of the run, holds
at 1, and ramps back to 0 over the last quarter; after the run the reference
hovers at its final point.

Attitude follows from differential flatness with zero yaw, body rates from
numerically differencing that attitude, and the feed-forward input splits the
required collective thrust evenly over the four rotors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from gpmpc import quad_model as qm

OMEGA = math.sqrt(2.0)
RADIUS = 5.0
ALTITUDE = 2.5
RAMP_FRACTION = 0.25
_RATE_EPS = 1e-4


@dataclass(frozen=True)
class Lemniscate:
    duration: float
    speed_scale: float = 1.0
    ramp_fraction: float = RAMP_FRACTION

    @property
    def ramp_time(self) -> float:
        return self.ramp_fraction * self.duration

    def phase(self, t: float) -> tuple[float, float, float]:
        """Phase and its first two time derivatives."""
        T, tr = self.duration, self.ramp_time
        k = OMEGA * self.speed_scale
        if t <= 0.0:
            # right limit, so the start attitude already leans into the ramp
            return 0.0, 0.0, k / tr
        if t < tr:
            return k * t * t / (2 * tr), k * t / tr, k / tr
        if t <= T - tr:
            return k * (tr / 2 + (t - tr)), k, 0.0
        if t < T:
            rem = T - t
            return k * (T - tr - rem * rem / (2 * tr)), k * rem / tr, -k / tr
        return k * (T - tr), 0.0, 0.0

    def kinematics(self, t: float) -> tuple[NDArray, NDArray, NDArray, NDArray]:
        """Position, velocity, acceleration and jerk at time ``t``.

        The phase acceleration is piecewise constant, so the jerk is exact
        within each ramp segment.
        """
        phi, dphi, ddphi = self.phase(t)
        s, c = math.sin(phi), math.cos(phi)
        s2, c2 = math.sin(2 * phi), math.cos(2 * phi)
        p = np.array([RADIUS * c - RADIUS, 0.5 * RADIUS * s2, ALTITUDE])
        v = np.array([-RADIUS * s * dphi, RADIUS * c2 * dphi, 0.0])
        a = np.array(
            [
                -RADIUS * c * dphi**2 - RADIUS * s * ddphi,
                -2 * RADIUS * s2 * dphi**2 + RADIUS * c2 * ddphi,
                0.0,
            ]
        )
        j = np.array(
            [
                RADIUS * s * dphi**3 - 3 * RADIUS * c * dphi * ddphi,
                -4 * RADIUS * c2 * dphi**3 - 6 * RADIUS * s2 * dphi * ddphi,
                0.0,
            ]
        )
        return p, v, a, j


def flat_attitude(acc: NDArray, params: qm.QuadParams) -> NDArray:
    """Zero-yaw attitude whose thrust axis points along ``acc - g``."""
    thrust_dir = acc - params.gravity_vector
    z_b = thrust_dir / np.linalg.norm(thrust_dir)
    y_b = np.cross(z_b, [1.0, 0.0, 0.0])
    y_b /= np.linalg.norm(y_b)
    x_b = np.cross(y_b, z_b)
    return qm.rotmat_to_quat(np.column_stack([x_b, y_b, z_b]))


def lemniscate_reference(
    t: float, traj: Lemniscate, params: qm.QuadParams
) -> tuple[qm.State, NDArray]:
    """Reference state and feed-forward rotor thrusts at time ``t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    p, v, a, jerk = traj.kinematics(t)
    q = flat_attitude(a, params)
    # central difference of the attitude along the local jerk; differencing
    # across a ramp corner would see the step in acceleration as a rate spike
    q0 = flat_attitude(a - _RATE_EPS * jerk, params)
    q1 = flat_attitude(a + _RATE_EPS * jerk, params)
    if q1 @ q0 < 0:
        q1 = -q1
    dq = (q1 - q0) / (2 * _RATE_EPS)
    w = 2.0 * qm.quat_multiply(qm.quat_conjugate(q), dq)[1:]
    thrust = params.mass * np.linalg.norm(a - params.gravity_vector) / 4.0
    return qm.State(p, q, v, w), np.full(qm.NU, thrust)


def sample_reference(
    traj: Lemniscate, params: qm.QuadParams, times: NDArray
) -> tuple[NDArray, NDArray]:
    """Stacked reference state vectors (n, 13) and inputs (n, 4), sign-aligned."""
    X = np.empty((len(times), qm.NX))
    U = np.empty((len(times), qm.NU))
    for i, t in enumerate(times):
        x, u = lemniscate_reference(float(t), traj, params)
        X[i] = x.vector
        U[i] = u
    for i in range(1, len(X)):
        if X[i, 3:7] @ X[i - 1, 3:7] < 0:
            X[i, 3:7] *= -1.0
    return X, U


def peak_speed(traj: Lemniscate, samples: int = 20001) -> float:
    ts = np.linspace(0.0, traj.duration, samples)
    return max(float(np.linalg.norm(traj.kinematics(t)[1])) for t in ts)
