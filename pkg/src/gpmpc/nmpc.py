"""Gauss-Newton SQP tracking MPC in a real-time-iteration scheme.

Each SQP iteration rolls the model out from the measured state with the
current input guess, linearises every shooting interval, condenses the
state deviations away and solves a dense box-constrained QP in the
``4 N`` input increments. One iteration per control step is the default.

Three model variants are supported:

``nominal``
    The plain rigid-body model.
``precomputed``
    A constant body-frame acceleration per interval, supplied by the caller
    (node 0 from the measured state, the rest from the reference). When a
    residual model is also passed, node 0 is re-predicted online inside the
    solve from the initial state, so its cost counts as solver time.
``direct``
    The residual GP is queried at every node of every rollout, and its mean
    derivative enters the linearisation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gpmpc import quad_model as qm
from gpmpc.errors import InvalidInputError, NumericalError
from gpmpc.gp import ResidualModel
from gpmpc.qp import box_qp, kkt_residual

MODES = ("nominal", "precomputed", "direct")

DEFAULT_Q = (10.0,) * 3 + (5.0,) * 4 + (1.0,) * 3 + (0.1,) * 3
DEFAULT_R = (0.1,) * 4


@dataclass
class MpcConfig:
    horizon_T: float = 1.0
    N: int = 10
    Q: tuple[float, ...] = DEFAULT_Q
    Q_T: tuple[float, ...] | None = None
    R: tuple[float, ...] = DEFAULT_R
    mode: str = "nominal"
    sqp_iters_per_step: int = 1
    qp_kkt_tol: float = 1e-8
    qp_max_iters: int = 100
    substeps: int = 2
    # warm start shift in nodes; the closed loop sets this to control_dt / dt
    warm_shift: float = 1.0

    def __post_init__(self) -> None:
        self.Q = tuple(float(q) for q in self.Q)
        self.R = tuple(float(r) for r in self.R)
        if self.Q_T is None:
            self.Q_T = tuple(10.0 * q for q in self.Q)
        self.Q_T = tuple(float(q) for q in self.Q_T)
        if self.horizon_T <= 0:
            raise InvalidInputError("horizon_T must be positive")
        if self.N < 2:
            raise InvalidInputError("N must be at least 2")
        if len(self.Q) != qm.NX or len(self.Q_T) != qm.NX or len(self.R) != qm.NU:
            raise InvalidInputError("Q and Q_T need 13 entries, R needs 4")
        if min(self.Q + self.Q_T + self.R) < 0:
            raise InvalidInputError("weights must be non-negative")
        if max(self.Q[:3]) <= 0:
            raise InvalidInputError("at least one position weight must be positive")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sqp_iters_per_step < 1 or self.substeps < 1:
            raise InvalidInputError("sqp_iters_per_step and substeps must be >= 1")

    @property
    def dt(self) -> float:
        return self.horizon_T / self.N

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MpcConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown mpc fields: {sorted(unknown)}")
        return cls(**d)


def align_quaternions(quats: NDArray) -> NDArray:
    """Flip signs so consecutive quaternions lie in the same hemisphere."""
    out = np.array(quats, dtype=float)
    for k in range(1, len(out)):
        if out[k] @ out[k - 1] < 0:
            out[k] = -out[k]
    return out


@dataclass
class ReferenceWindow:
    """``N + 1`` reference states and ``N`` reference inputs on the MPC grid."""

    states: NDArray
    inputs: NDArray

    def __post_init__(self) -> None:
        self.states = np.array(self.states, dtype=float)
        self.inputs = np.array(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != qm.NX:
            raise InvalidInputError("reference states must be (N+1, 13)")
        if self.inputs.shape != (self.states.shape[0] - 1, qm.NU):
            raise InvalidInputError("reference inputs must be (N, 4)")
        self.states[:, qm.Q_SLICE] = align_quaternions(self.states[:, qm.Q_SLICE])

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def hover(cls, N: int, params: qm.QuadParams, p: Sequence[float] = (0.0, 0.0, 0.0)) -> ReferenceWindow:
        x = qm.State.hover(p).vector
        return cls(np.tile(x, (N + 1, 1)), np.full((N, qm.NU), params.hover_thrust))


@dataclass
class CorrectionSet:
    """Body-frame acceleration corrections for the ``N`` shooting intervals.

    ``quats[k]`` is the attitude used to rotate ``a_body[k]`` into the world
    frame.
    """

    a_body: NDArray
    quats: NDArray
    source: str = "schedule"

    def __post_init__(self) -> None:
        self.a_body = np.array(self.a_body, dtype=float)
        self.quats = np.array(self.quats, dtype=float)
        if self.a_body.ndim != 2 or self.a_body.shape[1] != 3 or self.quats.shape != (len(self.a_body), 4):
            raise InvalidInputError("corrections must be (N, 3) with (N, 4) quaternions")
        if not np.all(np.isfinite(self.a_body)):
            raise InvalidInputError("corrections must be finite")

    def __len__(self) -> int:
        return len(self.a_body)

    @classmethod
    def zeros(cls, N: int) -> CorrectionSet:
        return cls(np.zeros((N, 3)), np.tile([1.0, 0.0, 0.0, 0.0], (N, 1)), "zero")

    def world(self) -> NDArray:
        out = np.empty_like(self.a_body)
        for k in range(len(self.a_body)):
            out[k] = qm.quat_to_rotmat(qm.quat_normalize(self.quats[k])) @ self.a_body[k]
        return out


@dataclass
class SolveResult:
    states: NDArray
    inputs: NDArray
    sqp_iterations: int
    kkt_residual: float
    solve_time: float  # ms
    status: str
    cost: float = math.nan
    corrections_world: NDArray | None = field(default=None, repr=False)
    # stationarity of the first QP at a zero step: how far the initial guess is from a KKT point
    kkt_initial: float = math.nan

    @property
    def u0(self) -> NDArray:
        return self.inputs[0]


def stage_cost(
    x: ArrayLike, u: ArrayLike | None, x_ref: ArrayLike, u_ref: ArrayLike | None, cfg: MpcConfig, terminal: bool = False
) -> float:
    """Weighted squared tracking error of one node.

    The reference quaternion is flipped into the hemisphere of ``x`` before
    the component-wise difference. Terminal nodes use ``Q + Q_T`` and no
    input term.
    """
    x = np.asarray(x, dtype=float)
    xr = np.array(x_ref, dtype=float)
    if x[qm.Q_SLICE] @ xr[qm.Q_SLICE] < 0:
        xr[qm.Q_SLICE] *= -1.0
    e = x - xr
    Q = np.asarray(cfg.Q) + (np.asarray(cfg.Q_T) if terminal else 0.0)
    cost = float(e @ (Q * e))
    if not terminal and u is not None and u_ref is not None:
        du = np.asarray(u, dtype=float) - np.asarray(u_ref, dtype=float)
        cost += float(du @ (np.asarray(cfg.R) * du))
    return cost


def shift_trajectory(traj: NDArray, shift: float) -> NDArray:
    """Resample ``traj`` at index ``k + shift``, holding the last row."""
    traj = np.asarray(traj, dtype=float)
    n = len(traj)
    pos = np.minimum(np.arange(n) + shift, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (pos - i0)[:, None]
    return (1.0 - frac) * traj[i0] + frac * traj[i1]


class _Problem:
    """Everything a rollout needs, fixed for the duration of one solve."""

    def __init__(
        self,
        x0: NDArray,
        ref: ReferenceWindow,
        cfg: MpcConfig,
        params: qm.QuadParams,
        corr: CorrectionSet | None,
        residual: ResidualModel | None,
    ) -> None:
        self.x0 = x0
        self.ref = ref
        self.cfg = cfg
        self.params = params
        self.N = cfg.N
        self.h = cfg.dt / cfg.substeps
        self.mode = cfg.mode
        self.residual = residual
        self.a_fixed = corr.world() if cfg.mode == "precomputed" else None
        if self.a_fixed is not None and residual is not None:
            R0 = qm.quat_to_rotmat(x0[qm.Q_SLICE])
            self.a_fixed[0] = R0 @ residual.mean(R0.T @ x0[qm.V_SLICE])
        self.wx = np.tile(np.asarray(cfg.Q), (self.N + 1, 1))
        self.wx[-1] += np.asarray(cfg.Q_T)
        self.wu = np.asarray(cfg.R)

    def correction(self, k: int, x: NDArray) -> NDArray | None:
        if self.mode == "precomputed":
            return self.a_fixed[k]
        if self.mode == "direct":
            R = qm.quat_to_rotmat(x[qm.Q_SLICE])
            return R @ self.residual.mean(R.T @ x[qm.V_SLICE])
        return None

    def rollout(self, U: NDArray) -> tuple[NDArray, NDArray]:
        X = np.empty((self.N + 1, qm.NX))
        Aw = np.zeros((self.N, 3))
        X[0] = self.x0
        for k in range(self.N):
            x = X[k]
            a = self.correction(k, x)
            if a is not None:
                Aw[k] = a
            for _ in range(self.cfg.substeps):
                x = qm.step_vector(x, U[k], self.h, self.params, a)
            X[k + 1] = x
        if not np.all(np.isfinite(X)):
            raise NumericalError("non-finite state in MPC rollout")
        return X, Aw

    def rollout_linearized(self, U: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
        N, nx = self.N, qm.NX
        X = np.empty((N + 1, nx))
        Aw = np.zeros((N, 3))
        A = np.empty((N, nx, nx))
        B = np.empty((N, nx, qm.NU))
        X[0] = self.x0
        for k in range(N):
            x = X[k]
            a = self.correction(k, x)
            if a is not None:
                Aw[k] = a
            Ak = np.eye(nx)
            Bk = np.zeros((nx, qm.NU + 3))
            for _ in range(self.cfg.substeps):
                x, As, Bs = qm.step_with_sensitivities(x, U[k], self.h, self.params, a)
                Ak = As @ Ak
                Bk = As @ Bk + Bs
            if self.mode == "direct":
                # GP input is the body velocity R' v; the attitude dependence of R
                # is dropped (Gauss-Newton approximation), only d mu / d v is kept.
                xk = X[k]
                R = qm.quat_to_rotmat(xk[qm.Q_SLICE])
                dmu = self.residual.mean_derivative(R.T @ xk[qm.V_SLICE])
                Ak[:, qm.V_SLICE] += Bk[:, qm.NU :] @ (R * dmu) @ R.T
            X[k + 1] = x
            A[k] = Ak
            B[k] = Bk[:, : qm.NU]
        if not np.all(np.isfinite(X)):
            raise NumericalError("non-finite state in MPC rollout")
        return X, A, B, Aw

    def aligned_reference(self, X: NDArray) -> NDArray:
        Xr = self.ref.states.copy()
        flip = np.einsum("ij,ij->i", X[:, qm.Q_SLICE], Xr[:, qm.Q_SLICE]) < 0
        Xr[flip, qm.Q_SLICE] *= -1.0
        return Xr

    def objective(self, X: NDArray, U: NDArray) -> float:
        ex = X - self.aligned_reference(X)
        eu = U - self.ref.inputs
        return float(np.sum(self.wx * ex * ex) + np.sum(self.wu * eu * eu))


def _condensed_matrices(
    A: NDArray, B: NDArray, ex: NDArray, eu: NDArray, wx: NDArray, wu: NDArray
) -> tuple[NDArray, NDArray]:
    """Hessian and gradient of the QP in the stacked input increments."""
    N, nx, nu = B.shape
    G = np.zeros((N + 1, nx, N * nu))
    for k in range(N):
        G[k + 1] = A[k] @ G[k]
        G[k + 1][:, k * nu : (k + 1) * nu] += B[k]
    sw = np.sqrt(wx)
    Gw = (G * sw[:, :, None]).reshape(-1, N * nu)
    wu_flat = np.broadcast_to(wu, (N, nu)).ravel()
    H = Gw.T @ Gw + np.diag(wu_flat)
    g = Gw.T @ (sw * ex).ravel() + wu_flat * eu.ravel()
    return H, g


def condense_and_solve_qp(
    A: NDArray,
    B: NDArray,
    state_residuals: NDArray,
    input_residuals: NDArray,
    state_weights: NDArray,
    input_weights: NDArray,
    du_lower: NDArray,
    du_upper: NDArray,
    tol: float = 1e-8,
    max_iter: int = 100,
):
    """Solve the condensed linear-quadratic subproblem.

    Minimises ``sum_k |e_k + dx_k|^2_Wx + |r_k + du_k|^2_Wu`` with
    ``dx_0 = 0``, ``dx_{k+1} = A_k dx_k + B_k du_k`` and box bounds on
    ``du``. Arrays are per node: ``A`` (N, nx, nx), ``B`` (N, nx, nu),
    ``state_residuals`` and ``state_weights`` (N+1, nx), input arrays (N, nu).
    Returns the QP result with ``x`` reshaped to (N, nu).
    """
    B = np.asarray(B, dtype=float)
    N, _, nu = B.shape
    H, g = _condensed_matrices(
        np.asarray(A, dtype=float),
        B,
        np.asarray(state_residuals, dtype=float),
        np.asarray(input_residuals, dtype=float),
        np.asarray(state_weights, dtype=float),
        np.asarray(input_weights, dtype=float),
    )
    res = box_qp(H, g, np.ravel(du_lower), np.ravel(du_upper), tol=tol, max_iter=max_iter)
    res.x = res.x.reshape(N, nu)
    return res


def _check_mode_inputs(cfg: MpcConfig, corr: CorrectionSet | None, residual: ResidualModel | None) -> None:
    if cfg.mode == "precomputed":
        if corr is None:
            raise InvalidInputError("precomputed mode requires a CorrectionSet")
        if len(corr) != cfg.N:
            raise InvalidInputError(f"CorrectionSet has {len(corr)} entries, expected {cfg.N}")
    if cfg.mode == "direct" and residual is None:
        raise InvalidInputError("direct mode requires a ResidualModel")


def solve(
    x_init: qm.State | ArrayLike,
    ref: ReferenceWindow,
    cfg: MpcConfig,
    params: qm.QuadParams,
    corr: CorrectionSet | None = None,
    residual: ResidualModel | None = None,
    warm: SolveResult | None = None,
) -> SolveResult:
    """Run ``cfg.sqp_iters_per_step`` Gauss-Newton iterations.

    A full step is taken whenever it does not raise the objective; otherwise
    the step is halved until it does, so iterates on a fixed problem never
    get worse.
    """
    t_start = time.perf_counter()
    _check_mode_inputs(cfg, corr, residual)
    if ref.N != cfg.N:
        raise InvalidInputError(f"reference window has {ref.N} intervals, expected {cfg.N}")
    x0 = x_init.vector if isinstance(x_init, qm.State) else np.array(x_init, dtype=float)
    prob = _Problem(x0, ref, cfg, params, corr, residual)

    if warm is not None:
        U = np.clip(shift_trajectory(warm.inputs, cfg.warm_shift), params.u_min, params.u_max)
    else:
        U = np.full((cfg.N, qm.NU), params.hover_thrust)

    status = "ok"
    kkt = 0.0
    kkt_initial = math.nan
    for it in range(cfg.sqp_iters_per_step):
        X, A, B, a_world = prob.rollout_linearized(U)
        J = prob.objective(X, U)
        ex = X - prob.aligned_reference(X)
        H, g = _condensed_matrices(A, B, ex, U - ref.inputs, prob.wx, prob.wu)
        lb = (params.u_min - U).ravel()
        ub = (params.u_max - U).ravel()
        if it == 0:
            kkt_initial = kkt_residual(H, g, lb, ub, np.zeros_like(g))
        qp = box_qp(H, g, lb, ub, tol=cfg.qp_kkt_tol, max_iter=cfg.qp_max_iters)
        kkt = qp.kkt_residual
        if not qp.converged:
            status = "degraded"
        dU = qp.x.reshape(cfg.N, qm.NU)
        alpha = 1.0
        accepted = False
        for _ls in range(12):
            U_new = np.clip(U + alpha * dU, params.u_min, params.u_max)
            X_new, a_new = prob.rollout(U_new)
            J_new = prob.objective(X_new, U_new)
            if J_new <= J:
                U, X, J, a_world = U_new, X_new, J_new, a_new
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break

    return SolveResult(
        states=X,
        inputs=U,
        sqp_iterations=cfg.sqp_iters_per_step,
        kkt_residual=kkt,
        solve_time=1e3 * (time.perf_counter() - t_start),
        status=status,
        cost=J,
        corrections_world=a_world,
        kkt_initial=kkt_initial,
    )


class MpcSolver:
    """Stateful wrapper that warm-starts every solve from the previous one."""

    def __init__(self, params: qm.QuadParams, cfg: MpcConfig) -> None:
        self.params = params
        self.cfg = cfg
        self.last: SolveResult | None = None

    def reset(self) -> None:
        self.last = None

    def step(
        self,
        x_init: qm.State | ArrayLike,
        ref: ReferenceWindow,
        corr: CorrectionSet | None = None,
        residual: ResidualModel | None = None,
    ) -> SolveResult:
        self.last = solve(x_init, ref, self.cfg, self.params, corr, residual, self.last)
        return self.last
