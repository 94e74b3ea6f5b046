"""Closed-loop simulation: drag plant, noisy sensing, MPC in the loop, metrics.

The loop runs on the plant clock. Measurements are taken every
``plant_rate / sensor_rate`` plant steps, the controller solves every
``plant_rate / control_rate`` plant steps using the newest measurement, and
the first rotor-thrust input is held until the next solve.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from gpmpc import quad_model as qm
from gpmpc.errors import GpMpcError, InvalidInputError
from gpmpc.gp import ResidualModel
from gpmpc.nmpc import MpcConfig, MpcSolver, ReferenceWindow
from gpmpc.pipeline import CorrectionSchedule, PipelineConfig, corrections_for_step, precompute_schedule
from gpmpc.reference import Lemniscate, sample_reference

log = logging.getLogger(__name__)

BENCHMARK_NOISE = {
    "noise_pos": 0.007,
    "noise_att": math.radians(0.4),
    "noise_vel": 0.007,
    "noise_rate": math.radians(0.4),
}


@dataclass
class SimConfig:
    drag: tuple[float, float, float] = (0.30, 0.30, 0.15)
    noise_pos: float = 0.0  # m
    noise_att: float = 0.0  # rad
    noise_vel: float = 0.0  # m/s
    noise_rate: float = 0.0  # rad/s
    control_rate: int = 50
    sensor_rate: int = 100
    plant_rate: int = 1000
    seed: int = 0
    duration: float = 20.0
    speed_scale: float = 1.0
    rng: str = "philox"

    def __post_init__(self) -> None:
        self.drag = tuple(float(d) for d in self.drag)
        if not self.plant_rate >= self.sensor_rate >= self.control_rate > 0:
            raise InvalidInputError("need plant_rate >= sensor_rate >= control_rate > 0")
        if self.plant_rate % self.sensor_rate or self.sensor_rate % self.control_rate:
            raise InvalidInputError("rates must divide each other exactly")
        if min(self.noise_pos, self.noise_att, self.noise_vel, self.noise_rate) < 0:
            raise InvalidInputError("noise standard deviations must be non-negative")
        if self.rng != "philox":
            raise InvalidInputError(f"unsupported rng {self.rng!r}; only 'philox' is available")
        if self.duration <= 0 or self.speed_scale < 0:
            raise InvalidInputError("duration must be positive and speed_scale non-negative")

    @property
    def noisy(self) -> bool:
        return max(self.noise_pos, self.noise_att, self.noise_vel, self.noise_rate) > 0

    def with_benchmark_noise(self) -> SimConfig:
        return replace(self, **BENCHMARK_NOISE)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SimConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown sim fields: {sorted(unknown)}")
        return cls(**d)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; the only generator the simulator uses."""
    return np.random.Generator(np.random.Philox(seed))


def plant_step(x_true: NDArray, u: NDArray, dt: float, sim: SimConfig, params: qm.QuadParams) -> NDArray:
    """Truth model: nominal dynamics plus linear body-frame rotor drag."""
    drag = np.asarray(sim.drag) if any(sim.drag) else None
    return qm.step_vector(np.asarray(x_true, dtype=float), np.asarray(u, dtype=float), dt, params, drag=drag)


def sense(x_true: NDArray, sim: SimConfig, rng: np.random.Generator) -> NDArray:
    """Noisy measurement of the full state.

    Draw order per call: position, velocity, body rates, attitude axis,
    attitude angle. The attitude error is a rotation about a uniformly random
    axis by a normally distributed angle.
    """
    x = np.array(x_true, dtype=float)
    dp = rng.standard_normal(3)
    dv = rng.standard_normal(3)
    dw = rng.standard_normal(3)
    axis = rng.standard_normal(3)
    angle = rng.standard_normal()
    x[qm.P_SLICE] += sim.noise_pos * dp
    x[qm.V_SLICE] += sim.noise_vel * dv
    x[qm.W_SLICE] += sim.noise_rate * dw
    if sim.noise_att > 0:
        dq = qm.quat_from_axis_angle(axis, sim.noise_att * angle)
        x[qm.Q_SLICE] = qm.quat_normalize(qm.quat_multiply(dq, x[qm.Q_SLICE]))
    return x


STATE_COLS = ["px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
LOG_HEADER = (
    ["t"]
    + [f"ref_{c}" for c in STATE_COLS]
    + [f"meas_{c}" for c in STATE_COLS]
    + [f"true_{c}" for c in STATE_COLS]
    + ["u0", "u1", "u2", "u3", "vpred_x", "vpred_y", "vpred_z", "sqp_iters", "kkt", "status", "corr_source"]
    + ["solve_time_ms"]
)


@dataclass
class FlightLog:
    """Per-control-step record of one closed-loop run."""

    mode: str
    t: NDArray
    ref: NDArray
    meas: NDArray
    true: NDArray
    u: NDArray
    v_pred: NDArray
    sqp_iters: NDArray
    kkt: NDArray
    status: list[str]
    corr_source: list[str]
    solve_time_ms: NDArray
    metadata: dict[str, Any] = field(default_factory=dict)
    aborted: str | None = None

    def __len__(self) -> int:
        return len(self.t)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
            for i in range(len(self.t)):
                nums = np.concatenate(
                    [[self.t[i]], self.ref[i], self.meas[i], self.true[i], self.u[i], self.v_pred[i]]
                )
                writer.writerow(
                    [repr(float(v)) for v in nums]
                    + [int(self.sqp_iters[i]), repr(float(self.kkt[i])), self.status[i], self.corr_source[i]]
                    + [repr(float(self.solve_time_ms[i]))]
                )

    @classmethod
    def read_csv(cls, path: str | Path, mode: str = "") -> FlightLog:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != LOG_HEADER:
                raise InvalidInputError(f"{path}: not a flight log")
            rows = [r for r in reader if r]
        num = np.array([[float(v) for v in r[:47]] for r in rows]).reshape(-1, 47)
        return cls(
            mode=mode,
            t=num[:, 0],
            ref=num[:, 1:14],
            meas=num[:, 14:27],
            true=num[:, 27:40],
            u=num[:, 40:44],
            v_pred=num[:, 44:47],
            sqp_iters=np.array([int(r[47]) for r in rows]),
            kkt=np.array([float(r[48]) for r in rows]),
            status=[r[49] for r in rows],
            corr_source=[r[50] for r in rows],
            solve_time_ms=np.array([float(r[51]) for r in rows]),
        )


@dataclass
class Metrics:
    mode: str
    rmse_pos_mm: float
    rmse_xy_mm: float
    max_speed_achieved: float
    mean_solve_ms: float
    median_solve_ms: float
    p95_solve_ms: float
    steps: int

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_metrics(flight: FlightLog) -> Metrics:
    """RMSE of true position against the reference over the whole log."""
    if len(flight) == 0:
        raise InvalidInputError("empty flight log")
    err = flight.true[:, qm.P_SLICE] - flight.ref[:, qm.P_SLICE]
    sq = np.sum(err * err, axis=1)
    sq_xy = np.sum(err[:, :2] ** 2, axis=1)
    st = flight.solve_time_ms
    return Metrics(
        mode=flight.mode,
        rmse_pos_mm=1e3 * math.sqrt(float(np.mean(sq))),
        rmse_xy_mm=1e3 * math.sqrt(float(np.mean(sq_xy))),
        max_speed_achieved=float(np.max(np.linalg.norm(flight.true[:, qm.V_SLICE], axis=1))),
        mean_solve_ms=float(np.mean(st)),
        median_solve_ms=float(np.median(st)),
        p95_solve_ms=float(np.percentile(st, 95)),
        steps=len(flight),
    )


def run_closed_loop(
    mode: str,
    params: qm.QuadParams,
    mpc: MpcConfig,
    sim: SimConfig,
    model: ResidualModel | None = None,
    schedule: CorrectionSchedule | None = None,
    pipeline: PipelineConfig | None = None,
) -> FlightLog:
    """Fly the lemniscate once with the given controller variant."""
    pipeline = pipeline or PipelineConfig()
    if mode in ("precomputed", "direct") and model is None:
        raise InvalidInputError(f"mode {mode!r} needs a trained residual model")

    dt_ctrl = 1.0 / sim.control_rate
    dt_plant = 1.0 / sim.plant_rate
    plant_per_ctrl = sim.plant_rate // sim.control_rate
    plant_per_sense = sim.plant_rate // sim.sensor_rate
    ratio = mpc.dt / dt_ctrl
    node_stride = int(round(ratio))
    if abs(ratio - node_stride) > 1e-9 or node_stride < 1:
        raise InvalidInputError("MPC node spacing must be a whole number of control periods")
    cfg = replace(mpc, mode=mode, warm_shift=1.0 / node_stride)

    n_steps = int(round(sim.duration * sim.control_rate))
    traj = Lemniscate(sim.duration, sim.speed_scale)
    grid = np.arange(n_steps + cfg.N * node_stride + 1) * dt_ctrl
    ref_X, ref_U = sample_reference(traj, params, grid)
    if mode == "precomputed" and schedule is None:
        schedule = precompute_schedule(model, grid, ref_X)

    solver = MpcSolver(params, cfg)
    rng = make_rng(sim.seed)
    x_true = ref_X[0].copy()
    x_meas = sense(x_true, sim, rng)

    rows_meas, rows_true, rows_u, rows_vp = [], [], [], []
    sqp_iters, kkts, statuses, sources, times = [], [], [], [], []
    aborted = None
    nominal_drag_free = replace(sim, drag=(0.0, 0.0, 0.0))

    for j in range(n_steps):
        t = j * dt_ctrl
        window = ReferenceWindow(
            ref_X[j : j + cfg.N * node_stride + 1 : node_stride], ref_U[j : j + cfg.N * node_stride : node_stride]
        )
        try:
            if mode == "precomputed":
                # the schedule lookup stays outside the timed region; the
                # online node-0 prediction happens inside the solve
                corr = corrections_for_step(
                    t, x_meas, schedule, model, solver.last, cfg, ref_X[j, qm.P_SLICE], pipeline.fallback_threshold
                )
                t0 = time.perf_counter()
                res = solver.step(x_meas, window, corr=corr, residual=model)
                source = corr.source
            elif mode == "direct":
                t0 = time.perf_counter()
                res = solver.step(x_meas, window, residual=model)
                source = "online"
            else:
                t0 = time.perf_counter()
                res = solver.step(x_meas, window)
                source = "none"
            elapsed = 1e3 * (time.perf_counter() - t0)
        except GpMpcError as exc:
            aborted = f"t={t:.3f}: {exc}"
            log.error("closed loop aborted at %s", aborted)
            break

        u = res.u0.copy()
        x_pred = x_meas.copy()
        for _ in range(plant_per_ctrl):
            x_pred = plant_step(x_pred, u, dt_plant, nominal_drag_free, params)

        rows_meas.append(x_meas.copy())
        rows_true.append(x_true.copy())
        rows_u.append(u)
        rows_vp.append(x_pred[qm.V_SLICE].copy())
        sqp_iters.append(res.sqp_iterations)
        kkts.append(res.kkt_residual)
        statuses.append(res.status)
        sources.append(source)
        times.append(elapsed)

        for i in range(1, plant_per_ctrl + 1):
            x_true = plant_step(x_true, u, dt_plant, sim, params)
            if i % plant_per_sense == 0:
                x_meas = sense(x_true, sim, rng)

    n = len(rows_meas)
    return FlightLog(
        mode=mode,
        t=grid[:n].copy(),
        ref=ref_X[:n].copy(),
        meas=np.array(rows_meas).reshape(n, qm.NX),
        true=np.array(rows_true).reshape(n, qm.NX),
        u=np.array(rows_u).reshape(n, qm.NU),
        v_pred=np.array(rows_vp).reshape(n, 3),
        sqp_iters=np.array(sqp_iters, dtype=int),
        kkt=np.array(kkts),
        status=statuses,
        corr_source=sources,
        solve_time_ms=np.array(times),
        metadata={"mode": mode, "seed": sim.seed, "speed_scale": sim.speed_scale, "noisy": sim.noisy},
        aborted=aborted,
    )
