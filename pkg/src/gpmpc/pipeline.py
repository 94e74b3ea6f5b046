"""From closed-loop logs to residual models and per-step MPC corrections.

Training targets are one-step velocity prediction errors of the nominal
model divided by the step length, expressed in the body frame of the
measured attitude at the start of the step. Each body axis gets its own
1-D GP: medians of equal-width velocity bins feed a dense GP, which is then
condensed onto inducing points placed at bin-mean velocities.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gpmpc import gp
from gpmpc import quad_model as qm
from gpmpc.errors import DataError, InvalidInputError
from gpmpc.nmpc import CorrectionSet, MpcConfig, SolveResult, shift_trajectory

if TYPE_CHECKING:
    from gpmpc.sim import FlightLog

log = logging.getLogger(__name__)

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

DATASET_HEADER = [
    "t", "dt", "vx", "vy", "vz",
    "vx_meas_next", "vy_meas_next", "vz_meas_next",
    "vx_pred_next", "vy_pred_next", "vz_pred_next",
    "aex", "aey", "aez",
]  # fmt: skip
SCHEDULE_HEADER = ["t", "ax", "ay", "az", "qw", "qx", "qy", "qz"]


@dataclass
class PipelineConfig:
    n_bins: int = 400
    n_inducing: int = 20
    fallback_threshold: float = 0.5
    collect_runs: int = 3
    collect_speed_scale: float = 0.8
    collect_duration: float = 25.0
    train_restarts: int = 5
    train_max_iters: int = 200
    train_grad_tol: float = 1e-6
    train_seed: int = 0
    min_samples: int = 50

    @property
    def train_config(self) -> gp.TrainConfig:
        return gp.TrainConfig(self.train_restarts, self.train_max_iters, self.train_grad_tol, self.train_seed)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PipelineConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown pipeline fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainingSample:
    t_k: float
    dt_k: float
    v_body_k: NDArray
    v_body_next_meas: NDArray
    v_body_next_pred: NDArray
    a_e: NDArray


@dataclass
class Dataset:
    """Column-oriented training samples; row ``i`` is one control step."""

    t: NDArray
    dt: NDArray
    v_body: NDArray
    v_next_meas: NDArray
    v_next_pred: NDArray
    a_e: NDArray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.dt = np.asarray(self.dt, dtype=float).reshape(-1)
        for name in ("v_body", "v_next_meas", "v_next_pred", "a_e"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1, 3))
        n = len(self.t)
        if any(len(getattr(self, f)) != n for f in ("dt", "v_body", "v_next_meas", "v_next_pred", "a_e")):
            raise DataError("dataset columns have different lengths")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise DataError("sample times must be strictly increasing")
        if np.any(self.dt <= 0):
            raise DataError("sample dt must be positive")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[TrainingSample]:
        for i in range(len(self)):
            yield TrainingSample(
                self.t[i], self.dt[i], self.v_body[i], self.v_next_meas[i], self.v_next_pred[i], self.a_e[i]
            )

    @classmethod
    def concatenate(cls, parts: list[Dataset], gap: float = 1.0) -> Dataset:
        """Join runs end to end, offsetting times so they stay increasing."""
        if not parts:
            raise DataError("nothing to concatenate")
        offset = 0.0
        cols: dict[str, list[NDArray]] = {k: [] for k in ("t", "dt", "v_body", "v_next_meas", "v_next_pred", "a_e")}
        for part in parts:
            if len(part) == 0:
                continue
            cols["t"].append(part.t - part.t[0] + offset)
            for k in ("dt", "v_body", "v_next_meas", "v_next_pred", "a_e"):
                cols[k].append(getattr(part, k))
            offset = cols["t"][-1][-1] + gap
        meta = {"runs": [p.metadata for p in parts]}
        return cls(**{k: np.concatenate(v) for k, v in cols.items()}, metadata=meta)

    def write_csv(self, path: str | Path) -> None:
        rows = np.column_stack([self.t, self.dt, self.v_body, self.v_next_meas, self.v_next_pred, self.a_e])
        _write_rows(path, DATASET_HEADER, rows)

    @classmethod
    def read_csv(cls, path: str | Path) -> Dataset:
        rows = _read_rows(path, DATASET_HEADER)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2:5], rows[:, 5:8], rows[:, 8:11], rows[:, 11:14])


def _write_rows(path: str | Path, header: list[str], rows: NDArray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def _read_rows(path: str | Path, header: list[str]) -> NDArray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise DataError(f"{path}: expected header {header}, got {got}")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, len(header))


def compute_accel_error(v_next_meas: ArrayLike, v_next_pred: ArrayLike, dt: float) -> NDArray:
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    return (np.asarray(v_next_meas, dtype=float) - np.asarray(v_next_pred, dtype=float)) / dt


def collect(flight: FlightLog) -> Dataset:
    """One sample per consecutive pair of control steps in ``flight``.

    Both velocities at ``k + 1`` are rotated with the measured attitude at
    ``k`` so that the difference is taken in a single frame.
    """
    n = len(flight.t)
    if flight.v_pred is None or len(flight.v_pred) != n or not np.all(np.isfinite(flight.v_pred[: n - 1])):
        raise DataError("flight log lacks one-step velocity predictions")
    if n < 2:
        raise DataError("need at least two control steps to form a sample")
    m = n - 1
    v_body = np.empty((m, 3))
    v_meas = np.empty((m, 3))
    v_pred = np.empty((m, 3))
    for k in range(m):
        Rt = qm.quat_to_rotmat(qm.quat_normalize(flight.meas[k, qm.Q_SLICE])).T
        v_body[k] = Rt @ flight.meas[k, qm.V_SLICE]
        v_meas[k] = Rt @ flight.meas[k + 1, qm.V_SLICE]
        v_pred[k] = Rt @ flight.v_pred[k]
    dt = np.diff(flight.t)
    a_e = (v_meas - v_pred) / dt[:, None]
    return Dataset(flight.t[:m], dt, v_body, v_meas, v_pred, a_e, metadata=dict(flight.metadata))


def _equal_width_bins(values: NDArray, n_bins: int) -> NDArray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(len(values), dtype=int)
    idx = np.floor((values - lo) / (hi - lo) * n_bins).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def bin_median_subsample(dataset: Dataset, axis: str | int, n_bins: int) -> tuple[NDArray, NDArray]:
    """Per non-empty equal-width velocity bin: (median velocity, median error)."""
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    if len(dataset) == 0:
        raise DataError("empty dataset")
    i = AXIS_INDEX.get(axis, axis) if isinstance(axis, str) else axis
    v = dataset.v_body[:, i]
    a = dataset.a_e[:, i]
    idx = _equal_width_bins(v, n_bins)
    inputs, targets = [], []
    for b in np.unique(idx):
        mask = idx == b
        inputs.append(np.median(v[mask]))
        targets.append(np.median(a[mask]))
    return np.array(inputs), np.array(targets)


def select_inducing(dataset: Dataset, axis: str | int, m: int) -> NDArray:
    """Mean velocity of each non-empty bin among ``m`` equal-width bins."""
    if m < 1:
        raise InvalidInputError("m must be >= 1")
    if not 15 <= m <= 25:
        log.warning("%d inducing points is outside the usual 15-25 range", m)
    i = AXIS_INDEX.get(axis, axis) if isinstance(axis, str) else axis
    v = dataset.v_body[:, i]
    idx = _equal_width_bins(v, m)
    return np.array([v[idx == b].mean() for b in np.unique(idx)])


def train_axis(dataset: Dataset, axis: str, config: PipelineConfig) -> gp.GpModel:
    i = AXIS_INDEX[axis]
    v = dataset.v_body[:, i]
    a = dataset.a_e[:, i]
    if np.ptp(v) == 0.0 or np.ptp(a) == 0.0:
        log.warning("axis %s has degenerate data; using a zero-mean model", axis)
        return gp.constant_zero_model()
    inputs, targets = bin_median_subsample(dataset, axis, config.n_bins)
    if len(inputs) < 2 or np.ptp(targets) == 0.0:
        log.warning("axis %s has too few distinct bins; using a zero-mean model", axis)
        return gp.constant_zero_model()
    hyper = gp.train_hyperparams(inputs, targets, config=config.train_config)
    dense = gp.gp_fit(inputs, targets, hyper)
    return gp.sparsify(dense, select_inducing(dataset, axis, config.n_inducing))


def train_residual_model(dataset: Dataset, config: PipelineConfig = PipelineConfig()) -> gp.ResidualModel:
    if len(dataset) < config.min_samples:
        raise DataError(f"need at least {config.min_samples} samples, got {len(dataset)}")
    return gp.ResidualModel(*(train_axis(dataset, axis, config) for axis in gp.AXES))


@dataclass
class CorrectionSchedule:
    """Body-frame corrections along the reference, one row per sample time."""

    t: NDArray
    a_body: NDArray
    quats: NDArray

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.a_body = np.asarray(self.a_body, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else math.inf

    def index(self, t: float) -> int:
        """Row whose time equals ``t``; raises if ``t`` is off the grid."""
        if len(self.t) == 0:
            raise DataError("empty correction schedule")
        i = int(round((t - self.t[0]) / self.dt)) if len(self.t) > 1 else 0
        if not 0 <= i < len(self.t) or abs(self.t[i] - t) > 1e-6:
            raise DataError(f"correction schedule has no entry at t={t:.6f}")
        return i

    def write_csv(self, path: str | Path) -> None:
        _write_rows(path, SCHEDULE_HEADER, np.column_stack([self.t, self.a_body, self.quats]))

    @classmethod
    def read_csv(cls, path: str | Path) -> CorrectionSchedule:
        rows = _read_rows(path, SCHEDULE_HEADER)
        return cls(rows[:, 0], rows[:, 1:4], rows[:, 4:8])


def precompute_schedule(model: gp.ResidualModel, times: ArrayLike, ref_states: NDArray) -> CorrectionSchedule:
    """Evaluate the residual model along the reference before flight."""
    times = np.asarray(times, dtype=float)
    ref_states = np.asarray(ref_states, dtype=float)
    a = np.empty((len(times), 3))
    quats = np.empty((len(times), 4))
    for i, x in enumerate(ref_states):
        q = qm.quat_normalize(x[qm.Q_SLICE])
        v_body = qm.quat_to_rotmat(q).T @ x[qm.V_SLICE]
        a[i] = gp.residual_predict(model, v_body)[0]
        quats[i] = q
    return CorrectionSchedule(times, a, quats)


def corrections_for_step(
    t: float,
    x_meas: qm.State | ArrayLike,
    schedule: CorrectionSchedule,
    model: gp.ResidualModel,
    prev: SolveResult | None,
    cfg: MpcConfig,
    p_ref: ArrayLike | None = None,
    fallback_threshold: float = 0.5,
) -> CorrectionSet:
    """Corrections for one MPC solve.

    Node 0 is always predicted online from the measured body velocity. Later
    nodes come from the schedule, unless the vehicle is further than
    ``fallback_threshold`` from ``p_ref`` and a previous solution exists, in
    which case they are predicted from that solution's shifted states.
    """
    x = x_meas.vector if isinstance(x_meas, qm.State) else np.asarray(x_meas, dtype=float)
    N = cfg.N
    a = np.empty((N, 3))
    quats = np.empty((N, 4))

    q0 = qm.quat_normalize(x[qm.Q_SLICE])
    a[0] = gp.residual_predict(model, qm.quat_to_rotmat(q0).T @ x[qm.V_SLICE])[0]
    quats[0] = q0

    source = "schedule"
    if p_ref is not None and np.linalg.norm(x[qm.P_SLICE] - np.asarray(p_ref, dtype=float)) > fallback_threshold:
        if prev is None:
            log.warning("t=%.3f: off reference but no previous solution; using schedule", t)
        else:
            source = "previous-solution"

    if source == "previous-solution":
        states = shift_trajectory(prev.states, cfg.warm_shift)
        for k in range(1, N):
            q = qm.quat_normalize(states[k, qm.Q_SLICE])
            a[k] = gp.residual_predict(model, qm.quat_to_rotmat(q).T @ states[k, qm.V_SLICE])[0]
            quats[k] = q
    else:
        for k in range(1, N):
            i = schedule.index(t + k * cfg.dt)
            a[k] = schedule.a_body[i]
            quats[k] = schedule.quats[i]
    return CorrectionSet(a, quats, source)
