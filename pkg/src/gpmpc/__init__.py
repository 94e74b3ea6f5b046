"""Gaussian-process-augmented model predictive control for quadrotors.

The package couples a 13-state rigid-body quadrotor model with per-axis GP
models of the residual (aerodynamic) acceleration and offers three MPC
variants: ``nominal`` (no residual), ``precomputed`` (node 0 online, remaining
nodes from a schedule evaluated on the reference) and ``direct`` (GP queried
inside every rollout).
"""

from gpmpc.config import Config
from gpmpc.errors import DataError, GpMpcError, InvalidInputError, NumericalError, TrainingError
from gpmpc.gp import GpHyperparams, GpModel, ResidualModel, gp_fit, gp_predict, residual_predict, sparsify
from gpmpc.nmpc import MpcConfig, MpcSolver, ReferenceWindow, SolveResult, solve
from gpmpc.quad_model import QuadParams, State, discrete_jacobians, rk4_step
from gpmpc.sim import SimConfig, compute_metrics, run_closed_loop

__all__ = [
    "Config",
    "DataError",
    "GpHyperparams",
    "GpMpcError",
    "GpModel",
    "InvalidInputError",
    "MpcConfig",
    "MpcSolver",
    "NumericalError",
    "QuadParams",
    "ReferenceWindow",
    "ResidualModel",
    "SimConfig",
    "SolveResult",
    "State",
    "TrainingError",
    "compute_metrics",
    "discrete_jacobians",
    "gp_fit",
    "gp_predict",
    "residual_predict",
    "rk4_step",
    "run_closed_loop",
    "solve",
    "sparsify",
]
