"""Experiment orchestration shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from gpmpc.config import Config
from gpmpc.gp import ResidualModel
from gpmpc.nmpc import MODES, MpcSolver, ReferenceWindow
from gpmpc.pipeline import Dataset, collect, corrections_for_step, precompute_schedule, train_residual_model
from gpmpc.reference import Lemniscate, sample_reference
from gpmpc.sim import FlightLog, Metrics, compute_metrics, run_closed_loop

log = logging.getLogger(__name__)


def collect_dataset(config: Config, seed: int | None = None) -> Dataset:
    """Fly the nominal controller on the ramped collection lemniscate.

    Runs ``pipeline.collect_runs`` times with consecutive seeds and joins the
    resulting datasets.
    """
    base_seed = config.sim.seed if seed is None else seed
    pl = config.pipeline
    parts = []
    for r in range(pl.collect_runs):
        sim = replace(
            config.sim,
            seed=base_seed + r,
            speed_scale=pl.collect_speed_scale,
            duration=pl.collect_duration,
        )
        flight = run_closed_loop("nominal", config.quad_params, config.mpc, sim, pipeline=pl)
        if flight.aborted:
            raise RuntimeError(f"collection run {r} aborted: {flight.aborted}")
        part = collect(flight)
        part.metadata = {"run": r, "seed": sim.seed, "noisy": sim.noisy}
        parts.append(part)
        log.info("collection run %d: %d samples", r, len(part))
    return Dataset.concatenate(parts)


def train(dataset: Dataset, config: Config) -> ResidualModel:
    return train_residual_model(dataset, config.pipeline)


def fly(config: Config, mode: str, model: ResidualModel | None = None) -> tuple[FlightLog, Metrics]:
    flight = run_closed_loop(mode, config.quad_params, config.mpc, config.sim, model=model, pipeline=config.pipeline)
    if flight.aborted:
        raise RuntimeError(f"{mode} run aborted: {flight.aborted}")
    return flight, compute_metrics(flight)


@dataclass
class Comparison:
    metrics: dict[str, Metrics]
    logs: dict[str, FlightLog] = field(default_factory=dict, repr=False)

    def pct_reduction(self, mode: str) -> float:
        base = self.metrics["nominal"].rmse_pos_mm
        return 100.0 * (base - self.metrics[mode].rmse_pos_mm) / base

    def table(self) -> list[dict[str, Any]]:
        rows = []
        for mode, m in self.metrics.items():
            rows.append(
                {
                    "mode": mode,
                    "rmse_mm": m.rmse_pos_mm,
                    "rmse_xy_mm": m.rmse_xy_mm,
                    "pct_reduction": 0.0 if mode == "nominal" else self.pct_reduction(mode),
                    "max_speed": m.max_speed_achieved,
                    "mean_solve_ms": m.mean_solve_ms,
                }
            )
        return rows


def compare(config: Config, model: ResidualModel, modes: Sequence[str] = MODES) -> Comparison:
    """Fly every mode on the same seed and reference."""
    metrics, logs = {}, {}
    for mode in modes:
        flight, m = fly(config, mode, model if mode != "nominal" else None)
        metrics[mode], logs[mode] = m, flight
        log.info("%s: rmse %.1f mm, mean solve %.2f ms", mode, m.rmse_pos_mm, m.mean_solve_ms)
    return Comparison(metrics, logs)


def sweep(config: Config, model: ResidualModel, scales: Sequence[float], modes: Sequence[str] = MODES) -> list[dict[str, Any]]:
    """Tracking error against achieved top speed for several speed scales."""
    rows = []
    for scale in scales:
        cfg = replace(config, sim=replace(config.sim, speed_scale=float(scale)))
        comp = compare(cfg, model, modes)
        row: dict[str, Any] = {
            "speed_scale": float(scale),
            "max_speed": comp.metrics["nominal"].max_speed_achieved,
        }
        for mode, m in comp.metrics.items():
            row[f"rmse_{mode}_mm"] = m.rmse_pos_mm
            row[f"mean_solve_{mode}_ms"] = m.mean_solve_ms
        rows.append(row)
    return rows


def replay_solve_times(
    config: Config,
    model: ResidualModel,
    flight: FlightLog,
    modes: Sequence[str] = MODES,
    repeats: int = 1,
) -> dict[str, float]:
    """Mean solve time per mode when every mode re-solves the same states.

    Closed-loop timings of different modes come from different trajectories,
    so their QP workloads differ. Here each mode gets its own warm-started
    solver and solves the measured states of ``flight`` in turn; the order of
    modes rotates every step so slow drifts of the machine average out.
    Only the solve call is timed.
    """
    params, sim = config.quad_params, config.sim
    dt_ctrl = 1.0 / sim.control_rate
    stride = int(round(config.mpc.dt / dt_ctrl))
    n = len(flight)
    traj = Lemniscate(sim.duration, sim.speed_scale)
    grid = np.arange(n + config.mpc.N * stride + 1) * dt_ctrl
    ref_X, ref_U = sample_reference(traj, params, grid)
    schedule = precompute_schedule(model, grid, ref_X) if "precomputed" in modes else None
    modes = list(modes)
    times: dict[str, list[float]] = {m: [] for m in modes}
    for _ in range(repeats):
        solvers = {m: MpcSolver(params, replace(config.mpc, mode=m, warm_shift=1.0 / stride)) for m in modes}
        for j in range(n):
            window = ReferenceWindow(ref_X[j : j + config.mpc.N * stride + 1 : stride], ref_U[j : j + config.mpc.N * stride : stride])
            x = flight.meas[j]
            k = j % len(modes)
            for m in modes[k:] + modes[:k]:
                solver = solvers[m]
                if m == "precomputed":
                    corr = corrections_for_step(
                        j * dt_ctrl, x, schedule, model, solver.last, solver.cfg, ref_X[j, :3],
                        config.pipeline.fallback_threshold,
                    )
                    t0 = time.perf_counter()
                    solver.step(x, window, corr=corr, residual=model)
                elif m == "direct":
                    t0 = time.perf_counter()
                    solver.step(x, window, residual=model)
                else:
                    t0 = time.perf_counter()
                    solver.step(x, window)
                times[m].append(time.perf_counter() - t0)
    return {m: 1e3 * float(np.mean(v)) for m, v in times.items()}
