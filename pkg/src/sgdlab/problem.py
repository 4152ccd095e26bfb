"""Quadratic least-squares problems and gradient-noise statistics.

A problem is a design matrix X (N x d) with labels Y. The training loss is
the mean squared residual L(theta) = ||Y - X theta||^2 / (2N), so the
curvature H = X^T X / N and linear term b = X^T Y / N fully describe it.
Synthetic data follows the generative model Y = X theta_bar + sigma_gen * eps
with standard-normal inputs and noise, which makes the gradient-noise
covariance approach sigma_gen^2 * H near theta_bar.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SingularModelError(ValueError):
    """Raised when H + lambda*I cannot be inverted.

    Carries the offending null direction in ``null_direction``.
    """

    def __init__(self, message: str, null_direction: np.ndarray | None = None):
        super().__init__(message)
        self.null_direction = null_direction


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RegressionDataset:
    """Immutable regression dataset, optionally with its generative ground truth."""

    X: np.ndarray
    Y: np.ndarray
    theta_bar: np.ndarray | None = None
    sigma_gen: float | None = None
    seed: int | None = None

    def __post_init__(self):
        X = _freeze(np.atleast_2d(self.X))
        Y = _freeze(np.atleast_1d(self.Y))
        if X.ndim != 2 or Y.ndim != 1:
            raise ValueError("X must be 2-d and Y 1-d")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need at least one sample and one feature")
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.theta_bar is not None:
            tb = _freeze(np.atleast_1d(self.theta_bar))
            if tb.shape != (X.shape[1],):
                raise ValueError("theta_bar must be a d-vector")
            object.__setattr__(self, "theta_bar", tb)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class QuadraticModel:
    """Quadratic loss surface H, b with its ridge solution mu.

    loss(theta) = 0.5 theta^T H theta - b^T theta + loss_offset, and mu solves
    (H + weight_decay*I) mu = b.
    """

    H: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    weight_decay: float = 0.0
    loss_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "H", _freeze(self.H))
        object.__setattr__(self, "b", _freeze(self.b))
        object.__setattr__(self, "mu", _freeze(self.mu))

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def loss(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(0.5 * theta @ self.H @ theta - self.b @ theta + self.loss_offset)

    def regularized_quadratic_loss(self, theta: np.ndarray) -> float:
        """0.5 (theta-mu)^T H (theta-mu) + (weight_decay/2) ||theta||^2."""
        dv = np.asarray(theta, dtype=float) - self.mu
        return float(0.5 * dv @ self.H @ dv + 0.5 * self.weight_decay * (theta @ theta))


class CovarianceMode(enum.Enum):
    SCALED_HESSIAN = "scaled_hessian"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class NoiseModel:
    """Gradient-noise covariance model.

    In SCALED_HESSIAN mode the single-sample covariance is exactly
    sigma_sq * H; minibatches of size S see sigma_sq * H / S.
    """

    sigma_sq: float
    mode: CovarianceMode = CovarianceMode.SCALED_HESSIAN

    def __post_init__(self):
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be nonnegative")

    def covariance(self, model: QuadraticModel) -> np.ndarray:
        if self.mode is not CovarianceMode.SCALED_HESSIAN:
            raise ValueError("only SCALED_HESSIAN mode has a closed-form covariance")
        return self.sigma_sq * model.H


def generate_regression(
    n: int,
    d: int,
    theta_bar: np.ndarray | float = 0.0,
    sigma_gen: float = 0.0,
    seed: int = 0,
    scales: np.ndarray | None = None,
) -> RegressionDataset:
    """Draw a synthetic regression dataset from the generative model.

    X entries are i.i.d. standard normal, optionally column-scaled by
    ``scales`` to shape the curvature spectrum (the Gram matrix concentrates
    on diag(scales^2) as n grows). Labels are Y = X theta_bar + sigma_gen*eps.
    Deterministic given ``seed``.
    """
    if n < 1 or d < 1:
        raise ValueError(f"invalid dimensions n={n}, d={d}")
    if sigma_gen < 0:
        raise ValueError("sigma_gen must be nonnegative")
    theta_bar = np.broadcast_to(np.asarray(theta_bar, dtype=float), (d,)).copy()
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    if scales is not None:
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (d,):
            raise ValueError("scales must be a d-vector")
        X = X * scales
    eps = rng.standard_normal(n)
    Y = X @ theta_bar + sigma_gen * eps
    return RegressionDataset(X=X, Y=Y, theta_bar=theta_bar, sigma_gen=sigma_gen, seed=seed)


def build_quadratic(dataset: RegressionDataset, weight_decay: float = 0.0) -> QuadraticModel:
    """Assemble H = X^T X / N, b = X^T Y / N and solve for the ridge solution."""
    if weight_decay < 0:
        raise ValueError("weight_decay must be nonnegative")
    n = dataset.n
    H = dataset.X.T @ dataset.X / n
    H = 0.5 * (H + H.T)  # exact symmetry
    b = dataset.X.T @ dataset.Y / n
    Hl = H + weight_decay * np.eye(dataset.d)
    try:
        mu = np.linalg.solve(Hl, b)
    except np.linalg.LinAlgError:
        mu = np.full(dataset.d, np.nan)
    bnorm = np.linalg.norm(b)
    residual = np.linalg.norm(Hl @ mu - b) if np.isfinite(mu).all() else np.inf
    if not np.isfinite(mu).all() or residual > 1e-8 * max(bnorm, 1e-300):
        vals, vecs = np.linalg.eigh(Hl)
        null = vecs[:, int(np.argmin(np.abs(vals)))]
        raise SingularModelError(
            f"H + {weight_decay}*I is singular or near-singular "
            f"(smallest eigenvalue {vals[np.argmin(np.abs(vals))]:.3e})",
            null_direction=null,
        )
    loss_offset = float(dataset.Y @ dataset.Y) / (2 * n)
    return QuadraticModel(H=H, b=b, mu=mu, weight_decay=weight_decay, loss_offset=loss_offset)


def full_gradient(model: QuadraticModel, theta: np.ndarray) -> np.ndarray:
    """Gradient of the unregularized loss, H theta - b (weight decay lives in the optimizer)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.d,):
        raise ValueError(f"theta must have shape ({model.d},), got {theta.shape}")
    return model.H @ theta - model.b


def per_sample_gradients(dataset: RegressionDataset, theta: np.ndarray) -> np.ndarray:
    """(n, d) array of single-sample gradients (x_i^T theta - y_i) x_i."""
    theta = np.asarray(theta, dtype=float)
    resid = dataset.X @ theta - dataset.Y
    return resid[:, None] * dataset.X


def batch_gradient(dataset: RegressionDataset, theta: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Mean of per-sample gradients over the index set ``batch``."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if batch.min() < 0 or batch.max() >= dataset.n:
        raise IndexError(f"batch indices must lie in [0, {dataset.n})")
    theta = np.asarray(theta, dtype=float)
    Xb = dataset.X[batch]
    resid = Xb @ theta - dataset.Y[batch]
    return Xb.T @ resid / batch.size


def noise_covariance_empirical(dataset: RegressionDataset, theta: np.ndarray) -> np.ndarray:
    """Biased (1/N) single-sample gradient covariance at theta."""
    G = per_sample_gradients(dataset, theta)
    g = G.mean(axis=0)
    sigma = G.T @ G / dataset.n - np.outer(g, g)
    return 0.5 * (sigma + sigma.T)


def save_dataset(dataset: RegressionDataset, path: str | Path) -> None:
    """Persist to <path>.npz with a JSON sidecar <path>.json."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), X=dataset.X, Y=dataset.Y)
    meta = {
        "n": dataset.n,
        "d": dataset.d,
        "seed": dataset.seed,
        "theta_bar": None if dataset.theta_bar is None else dataset.theta_bar.tolist(),
        "sigma_gen": dataset.sigma_gen,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_dataset(path: str | Path) -> RegressionDataset:
    path = Path(path)
    arrays = np.load(path.with_suffix(".npz"))
    meta = json.loads(path.with_suffix(".json").read_text())
    theta_bar = meta.get("theta_bar")
    return RegressionDataset(
        X=arrays["X"],
        Y=arrays["Y"],
        theta_bar=None if theta_bar is None else np.asarray(theta_bar, dtype=float),
        sigma_gen=meta.get("sigma_gen"),
        seed=meta.get("seed"),
    )
