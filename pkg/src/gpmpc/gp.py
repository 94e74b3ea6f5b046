"""One-dimensional GP regression with an RBF kernel.

Noise only enters on the diagonal of the Gram matrix; the kernel itself is
``sigma_f2 * exp(-0.5 (zi - zj)^2 / lengthscale^2)``. A jitter of
``1e-8 * sigma_f2`` is always added to the diagonal and escalated by 10x up to
``1e-4 * sigma_f2`` when the Cholesky factorisation fails.

Hyperparameter gradients are taken with respect to
``(log lengthscale, log sigma_f2, log sigma_n2)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg
import scipy.optimize
from numpy.typing import ArrayLike, NDArray

from gpmpc.errors import InvalidInputError, NumericalError, TrainingError

log = logging.getLogger(__name__)

JITTER_REL = 1e-8
JITTER_MAX = 1e-4
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class GpHyperparams:
    lengthscale: float
    sigma_f2: float
    sigma_n2: float

    def __post_init__(self) -> None:
        for name in ("lengthscale", "sigma_f2", "sigma_n2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInputError(f"{name} must be positive and finite, got {value}")

    @property
    def log_params(self) -> NDArray:
        return np.log([self.lengthscale, self.sigma_f2, self.sigma_n2])

    @classmethod
    def from_log(cls, theta: ArrayLike) -> GpHyperparams:
        ell, sf2, sn2 = np.exp(np.asarray(theta, dtype=float))
        return cls(float(ell), float(sf2), float(sn2))


def rbf_kernel(z_i: ArrayLike, z_j: ArrayLike, hyper: GpHyperparams) -> NDArray | float:
    """Noise-free RBF covariance; broadcasts over array arguments."""
    d = np.subtract(z_i, z_j)
    return hyper.sigma_f2 * np.exp(-0.5 * d * d / hyper.lengthscale**2)


def _factor(z: NDArray, hyper: GpHyperparams) -> tuple[NDArray, NDArray, float]:
    """Noise-free Gram matrix, Cholesky factor of the noisy one, jitter used."""
    Kf = rbf_kernel(z[:, None], z[None, :], hyper)
    jitter_rel = JITTER_REL
    while True:
        K = Kf + (hyper.sigma_n2 + jitter_rel * hyper.sigma_f2) * np.eye(len(z))
        try:
            L = scipy.linalg.cholesky(K, lower=True, check_finite=False)
            return Kf, L, jitter_rel * hyper.sigma_f2
        except np.linalg.LinAlgError:
            jitter_rel *= 10.0
            if jitter_rel > JITTER_MAX * (1 + 1e-9):
                raise NumericalError(
                    f"Gram matrix not positive definite after jitter {JITTER_MAX:g}*sigma_f2 "
                    f"(n={len(z)}, hyper={hyper})"
                ) from None


@dataclass(frozen=True, eq=False)
class GpModel:
    """A fitted GP. Construct with :func:`gp_fit`."""

    train_inputs: NDArray
    train_targets: NDArray
    hyper: GpHyperparams
    chol: NDArray
    alpha: NDArray
    jitter: float

    @property
    def n(self) -> int:
        return len(self.train_inputs)

    def mean(self, z: ArrayLike) -> NDArray | float:
        d = np.subtract.outer(z, self.train_inputs)
        k = self.hyper.sigma_f2 * np.exp(-0.5 * d * d / self.hyper.lengthscale**2)
        return k @ self.alpha

    def mean_derivative(self, z: ArrayLike) -> NDArray | float:
        d = np.subtract.outer(z, self.train_inputs)
        ell2 = self.hyper.lengthscale**2
        k = self.hyper.sigma_f2 * np.exp(-0.5 * d * d / ell2)
        return (k * (-d / ell2)) @ self.alpha

    def predict(self, z: ArrayLike) -> tuple[NDArray, NDArray]:
        """Posterior mean and variance at the points ``z`` (any shape)."""
        z = np.asarray(z, dtype=float)
        flat = z.ravel()
        kstar = rbf_kernel(flat[:, None], self.train_inputs[None, :], self.hyper)
        mu = kstar @ self.alpha
        v = scipy.linalg.solve_triangular(self.chol, kstar.T, lower=True, check_finite=False)
        var = self.hyper.sigma_f2 - np.einsum("ij,ij->j", v, v)
        var = np.where(var < 0.0, 0.0, var)
        return mu.reshape(z.shape), var.reshape(z.shape)

    def to_dict(self, axis: str = "") -> dict[str, Any]:
        return {
            "axis": axis,
            "inputs": self.train_inputs.tolist(),
            "targets": self.train_targets.tolist(),
            "lengthscale": self.hyper.lengthscale,
            "sigma_f2": self.hyper.sigma_f2,
            "sigma_n2": self.hyper.sigma_n2,
        }


def gp_fit(inputs: ArrayLike, targets: ArrayLike, hyper: GpHyperparams) -> GpModel:
    z = np.array(inputs, dtype=float).ravel()
    y = np.array(targets, dtype=float).ravel()
    if z.size < 1 or z.shape != y.shape:
        raise InvalidInputError("need at least one input and matching targets")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise InvalidInputError("inputs and targets must be finite")
    _, L, jitter = _factor(z, hyper)
    alpha = scipy.linalg.cho_solve((L, True), y, check_finite=False)
    return GpModel(z, y, hyper, L, alpha, jitter)


def gp_predict(model: GpModel, z_star: float) -> tuple[float, float]:
    mu, var = model.predict(np.array([z_star], dtype=float))
    return float(mu[0]), float(var[0])


def gp_mean_derivative(model: GpModel, z_star: float) -> float:
    return float(model.mean_derivative(float(z_star)))


def log_marginal_likelihood(inputs: ArrayLike, targets: ArrayLike, hyper: GpHyperparams) -> tuple[float, NDArray]:
    """Log evidence and its gradient w.r.t. the log-hyperparameters."""
    z = np.asarray(inputs, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    n = z.size
    if n < 1:
        raise InvalidInputError("need at least one data point")
    Kf, L, jitter = _factor(z, hyper)
    alpha = scipy.linalg.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2.0 * math.pi)

    Kinv = scipy.linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    d2 = (z[:, None] - z[None, :]) ** 2
    dK_ell = Kf * d2 / hyper.lengthscale**2
    # jitter scales with sigma_f2, so it belongs to that derivative
    dK_sf = Kf + jitter * np.eye(n)
    grad = 0.5 * np.array(
        [
            np.sum(W * dK_ell),
            np.sum(W * dK_sf),
            hyper.sigma_n2 * np.trace(W),
        ]
    )
    return float(value), grad


@dataclass(frozen=True)
class TrainConfig:
    restarts: int = 5
    max_iters: int = 200
    grad_tol: float = 1e-6
    seed: int = 0
    perturb_scale: float = 1.0


def default_init(inputs: ArrayLike, targets: ArrayLike) -> GpHyperparams:
    z = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    sz, sy = float(np.std(z)), float(np.std(y))
    if sz <= 0 or sy <= 0:
        raise InvalidInputError("inputs and targets need non-zero spread to initialise hyperparameters")
    return GpHyperparams(sz, sy**2, (0.1 * sy) ** 2)


def train_hyperparams(
    inputs: ArrayLike,
    targets: ArrayLike,
    init: GpHyperparams | None = None,
    config: TrainConfig = TrainConfig(),
) -> GpHyperparams:
    """Maximise the log evidence over log-hyperparameters with seeded restarts.

    Restart 0 starts from ``init``; the others perturb it in log space with
    draws from ``default_rng(config.seed)``. The best restart wins, ties going
    to the lower index, and the result is never worse than ``init``.
    """
    z = np.asarray(inputs, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if z.size < 2:
        raise InvalidInputError("need at least two data points to train")
    if init is None:
        init = default_init(z, y)
    theta0 = init.log_params

    span = float(np.ptp(z)) or 1.0
    var_y = float(np.var(y)) or init.sigma_f2
    bounds = [
        (math.log(1e-3 * span), math.log(1e3 * span)),
        (math.log(1e-6 * var_y), math.log(1e4 * var_y)),
        (math.log(1e-9 * var_y), math.log(1e2 * var_y)),
    ]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    bounds = [(min(l, t), max(h, t)) for l, h, t in zip(lo, hi, theta0)]

    def objective(theta: NDArray) -> tuple[float, NDArray]:
        value, grad = log_marginal_likelihood(z, y, GpHyperparams.from_log(theta))
        return -value, -grad

    rng = np.random.default_rng(config.seed)
    starts = [theta0]
    for _ in range(1, config.restarts):
        starts.append(np.clip(theta0 + config.perturb_scale * rng.standard_normal(3), lo, hi))

    best_theta, best_value = None, -math.inf
    try:
        best_theta, best_value = theta0, -objective(theta0)[0]
    except NumericalError:
        pass
    for i, start in enumerate(starts):
        try:
            res = scipy.optimize.minimize(
                objective,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": config.max_iters, "gtol": config.grad_tol},
            )
        except (NumericalError, InvalidInputError) as exc:
            log.debug("restart %d failed: %s", i, exc)
            continue
        if np.all(np.isfinite(res.x)) and math.isfinite(res.fun) and -res.fun > best_value:
            best_theta, best_value = res.x, -res.fun
    if best_theta is None:
        raise TrainingError(f"all {config.restarts} restarts failed")
    return GpHyperparams.from_log(best_theta)


REFINE_STEPS = 10


def sparsify(dense: GpModel, inducing_inputs: ArrayLike) -> GpModel:
    """Condense ``dense`` onto the inducing inputs via an effective prior.

    The returned m-point model has the dense hyperparameters and pseudo
    targets chosen so that its posterior mean at each inducing input equals
    the dense posterior mean there; between inducing points it interpolates
    that mean with the dense kernel.
    """
    u = np.array(inducing_inputs, dtype=float).ravel()
    if u.size < 1:
        raise InvalidInputError("need at least one inducing input")
    hyper = dense.hyper
    mu = np.asarray(dense.mean(u), dtype=float)
    Kf, _, jitter = _factor(u, hyper)
    eps = jitter
    while True:
        try:
            c = scipy.linalg.cho_factor(Kf + eps * np.eye(u.size), lower=True, check_finite=False)
            break
        except np.linalg.LinAlgError:
            eps *= 10.0
            if eps > JITTER_MAX * hyper.sigma_f2 * (1 + 1e-9):
                raise NumericalError("inducing Gram matrix is singular") from None
    w = scipy.linalg.cho_solve(c, mu, check_finite=False)
    # iterative refinement removes most of the bias the regularising eps adds
    for _ in range(REFINE_STEPS):
        w = w + scipy.linalg.cho_solve(c, mu - Kf @ w, check_finite=False)
    pseudo_targets = Kf @ w + (hyper.sigma_n2 + jitter) * w
    return gp_fit(u, pseudo_targets, hyper)


def constant_zero_model(hyper: GpHyperparams | None = None) -> GpModel:
    """Placeholder model whose mean is zero everywhere."""
    return gp_fit([0.0], [0.0], hyper or GpHyperparams(1.0, 1.0, 1.0))


@dataclass(frozen=True, eq=False)
class ResidualModel:
    """Independent per-axis GPs from body velocity to body acceleration error."""

    gp_x: GpModel
    gp_y: GpModel
    gp_z: GpModel

    @property
    def axes(self) -> tuple[GpModel, GpModel, GpModel]:
        return (self.gp_x, self.gp_y, self.gp_z)

    def mean(self, v_body: NDArray) -> NDArray:
        return np.array([gp.mean(float(v)) for gp, v in zip(self.axes, v_body)])

    def mean_derivative(self, v_body: NDArray) -> NDArray:
        return np.array([gp.mean_derivative(float(v)) for gp, v in zip(self.axes, v_body)])

    def save(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, gp in zip(AXES, self.axes):
            path = directory / f"model_{name}.json"
            save_model(gp, path, axis=name)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory: str | Path) -> ResidualModel:
        directory = Path(directory)
        return cls(*(load_model(directory / f"model_{name}.json") for name in AXES))


def residual_predict(model: ResidualModel, v_body: ArrayLike) -> tuple[NDArray, NDArray]:
    v = np.asarray(v_body, dtype=float).reshape(3)
    out = [gp_predict(gp, v[i]) for i, gp in enumerate(model.axes)]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(model: GpModel, axis: str = "") -> str:
    """JSON text with every float at 17 significant digits."""
    inputs = ", ".join(_fmt(v) for v in model.train_inputs)
    targets = ", ".join(_fmt(v) for v in model.train_targets)
    h = model.hyper
    return (
        "{\n"
        f'  "axis": {json.dumps(axis)},\n'
        f'  "inputs": [{inputs}],\n'
        f'  "targets": [{targets}],\n'
        f'  "lengthscale": {_fmt(h.lengthscale)},\n'
        f'  "sigma_f2": {_fmt(h.sigma_f2)},\n'
        f'  "sigma_n2": {_fmt(h.sigma_n2)}\n'
        "}\n"
    )


def save_model(model: GpModel, path: str | Path, axis: str = "") -> None:
    Path(path).write_text(dumps_model(model, axis))


def model_from_dict(d: dict[str, Any]) -> GpModel:
    hyper = GpHyperparams(float(d["lengthscale"]), float(d["sigma_f2"]), float(d["sigma_n2"]))
    return gp_fit(d["inputs"], d["targets"], hyper)


def load_model(path: str | Path) -> GpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
