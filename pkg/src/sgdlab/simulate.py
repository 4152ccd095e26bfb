"""Discrete SGD with momentum and weight decay, plus displacement tracking.

The update is the two-line heavy-ball recursion

    v_{k+1} = beta * v_k - g_B(theta_k) - weight_decay * theta_k
    theta_{k+1} = theta_k + eta * v_{k+1}

so consecutive iterates satisfy theta_{k+1} - theta_k = eta * v_{k+1} exactly.
Gradients come either from sampled minibatches or, in "idealized" mode, from
the full gradient plus exact Gaussian noise with covariance sigma_sq * H / S.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problem import NoiseModel, QuadraticModel, RegressionDataset, batch_gradient, full_gradient

NOISE_MODES = ("minibatch", "idealized")
SAMPLING_MODES = ("replacement", "epoch")


class DivergenceError(RuntimeError):
    """Trajectory left the finite range; carries the failing step and last finite state."""

    def __init__(self, step: int, last_state: "PhaseState"):
        super().__init__(f"trajectory diverged at step {step}")
        self.step = step
        self.last_state = last_state


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters eta, beta, weight_decay, batch_size with derived constants.

    Derived values are recomputed on access:
      kappa = S (1 - beta^2)          inverse temperature
      gamma = (1 - beta) / (eta (1 + beta))   friction rate
      mass  = eta (1 + beta) / 2      kinetic-energy mass
    """

    eta: float
    beta: float
    weight_decay: float = 0.0
    batch_size: int = 1

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def kappa(self) -> float:
        return self.batch_size * (1.0 - self.beta**2)

    @property
    def gamma(self) -> float:
        return (1.0 - self.beta) / (self.eta * (1.0 + self.beta))

    @property
    def mass(self) -> float:
        return 0.5 * self.eta * (1.0 + self.beta)


@dataclass(frozen=True)
class PhaseState:
    theta: np.ndarray
    v: np.ndarray
    step: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if theta.shape != v.shape or theta.ndim != 1:
            raise ValueError("theta and v must be 1-d arrays of equal length")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "v", v)


@dataclass
class TrajectoryRecord:
    """Per-step displacement statistics plus phase states sampled at a stride.

    delta_sq[k] = eta^2 ||v_k||^2 (= ||theta_k - theta_{k-1}||^2 for k >= 1),
    Delta_sq[k] = ||theta_k - theta_0||^2, and loss/reg_loss track the data
    loss and the regularized quadratic loss. Arrays cover k = 0..steps.
    """

    delta_sq: np.ndarray
    Delta_sq: np.ndarray
    loss: np.ndarray
    reg_loss: np.ndarray
    kinetic: np.ndarray
    state_steps: np.ndarray
    thetas: np.ndarray  # (len(state_steps), d)
    vels: np.ndarray
    seed: int
    stride: int
    noise_mode: str
    sampling: str
    config: OptimizerConfig
    model: QuadraticModel
    noise: NoiseModel | None = None
    states: list[PhaseState] = field(init=False)

    def __post_init__(self):
        self.states = [
            PhaseState(self.thetas[i], self.vels[i], int(k))
            for i, k in enumerate(self.state_steps)
        ]

    @property
    def steps(self) -> int:
        return len(self.delta_sq) - 1


class _GradientSource:
    """Seeded stochastic-gradient stream, replayable step by step."""

    def __init__(
        self,
        model: QuadraticModel,
        config: OptimizerConfig,
        seed: int,
        dataset: RegressionDataset | None,
        noise: NoiseModel | None,
        noise_mode: str,
        sampling: str,
    ):
        if noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
        self.model = model
        self.config = config
        self.dataset = dataset
        self.noise_mode = noise_mode
        self.sampling = sampling
        self.rng = np.random.default_rng(seed)
        if noise_mode == "idealized":
            if noise is None:
                raise ValueError("idealized mode needs a NoiseModel")
            self._noise_sqrt = noise_sqrt(model, noise, config.batch_size)
        else:
            if dataset is None:
                raise ValueError("minibatch mode needs a dataset")
            self._perm: np.ndarray = np.empty(0, dtype=int)
            self._cursor = 0

    def _next_batch(self) -> np.ndarray:
        n, S = self.dataset.n, self.config.batch_size
        if self.sampling == "replacement":
            return self.rng.integers(0, n, size=S)
        # epoch mode: sequential slices of a reshuffled permutation
        out = np.empty(S, dtype=int)
        filled = 0
        while filled < S:
            if self._cursor >= len(self._perm):
                self._perm = self.rng.permutation(n)
                self._cursor = 0
            take = min(S - filled, len(self._perm) - self._cursor)
            out[filled : filled + take] = self._perm[self._cursor : self._cursor + take]
            self._cursor += take
            filled += take
        return out

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        if self.noise_mode == "idealized":
            xi = self.rng.standard_normal(self.model.d)
            return full_gradient(self.model, theta) + self._noise_sqrt @ xi
        return batch_gradient(self.dataset, theta, self._next_batch())


def noise_sqrt(model: QuadraticModel, noise: NoiseModel, batch_size: int) -> np.ndarray:
    """Symmetric square root of the minibatch noise covariance sigma_sq * H / S."""
    vals, vecs = np.linalg.eigh(model.H)
    scaled = np.clip(vals, 0.0, None) * noise.sigma_sq / batch_size
    return (vecs * np.sqrt(scaled)) @ vecs.T


def sgd_step(
    state: PhaseState,
    config: OptimizerConfig,
    dataset: RegressionDataset,
    batch: np.ndarray,
) -> PhaseState:
    """One heavy-ball update from a minibatch; exactly the two-line recursion."""
    g = batch_gradient(dataset, state.theta, batch)
    v_new = config.beta * state.v - g - config.weight_decay * state.theta
    theta_new = state.theta + config.eta * v_new
    return PhaseState(theta=theta_new, v=v_new, step=state.step + 1)


def default_burn_in(config: OptimizerConfig) -> int:
    """10x the friction relaxation time 1/(gamma*eta), in steps."""
    return math.ceil(10.0 * (1.0 + config.beta) / (1.0 - config.beta))


def run(
    dataset: RegressionDataset | None,
    model: QuadraticModel,
    config: OptimizerConfig,
    steps: int,
    theta0: np.ndarray,
    seed: int,
    stride: int = 1,
    v0: np.ndarray | None = None,
    noise: NoiseModel | None = None,
    noise_mode: str = "minibatch",
    sampling: str = "replacement",
) -> TrajectoryRecord:
    """Run SGD for ``steps`` updates, recording displacement statistics.

    Deterministic given ``seed``. Batches are sampled uniformly with
    replacement (or by epoch shuffling when sampling="epoch"); in idealized
    mode the minibatch gradient is replaced by the full gradient plus exact
    Gaussian noise. Raises DivergenceError if the state leaves the finite
    range, reporting the step index and last finite state.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    theta = np.array(theta0, dtype=float)
    v = np.zeros_like(theta) if v0 is None else np.array(v0, dtype=float)
    grad = _GradientSource(model, config, seed, dataset, noise, noise_mode, sampling)

    d = theta.size
    eta, beta, wd = config.eta, config.beta, config.weight_decay
    delta_sq = np.empty(steps + 1)
    Delta_sq = np.empty(steps + 1)
    loss = np.empty(steps + 1)
    reg_loss = np.empty(steps + 1)
    kinetic = np.empty(steps + 1)
    rec_steps = list(range(0, steps + 1, stride))
    if rec_steps[-1] != steps:
        rec_steps.append(steps)
    thetas = np.empty((len(rec_steps), d))
    vels = np.empty((len(rec_steps), d))
    rec_idx = {k: i for i, k in enumerate(rec_steps)}

    theta_start = theta.copy()
    half_mass = 0.5 * config.mass

    def record(k: int) -> None:
        delta_sq[k] = eta**2 * (v @ v)
        Delta_sq[k] = float(np.sum((theta - theta_start) ** 2))
        loss[k] = model.loss(theta)
        reg_loss[k] = model.regularized_quadratic_loss(theta)
        kinetic[k] = half_mass * (v @ v)
        if k in rec_idx:
            i = rec_idx[k]
            thetas[i] = theta
            vels[i] = v

    record(0)
    for k in range(1, steps + 1):
        g = grad(theta)
        v = beta * v - g - wd * theta
        theta = theta + eta * v
        if not (np.isfinite(theta).all() and np.isfinite(v).all()):
            i = rec_idx.get(k - 1)
            last = PhaseState(
                thetas[i] if i is not None else theta_start, vels[i] if i is not None else v * 0,
                k - 1,
            )
            raise DivergenceError(step=k, last_state=last)
        record(k)

    return TrajectoryRecord(
        delta_sq=delta_sq,
        Delta_sq=Delta_sq,
        loss=loss,
        reg_loss=reg_loss,
        kinetic=kinetic,
        state_steps=np.asarray(rec_steps, dtype=int),
        thetas=thetas,
        vels=vels,
        seed=seed,
        stride=stride,
        noise_mode=noise_mode,
        sampling=sampling,
        config=config,
        model=model,
        noise=noise,
    )


def finite_difference_residual(
    traj: TrajectoryRecord,
    dataset: RegressionDataset | None,
    config: OptimizerConfig,
) -> float:
    """Replay the gradient stream and check the finite-difference identity.

    Returns max over k of
    || (theta_{k+1}-theta_k)/eta - beta (theta_k-theta_{k-1})/eta
       + weight_decay * theta_k + g_B(theta_k) ||_inf,
    which is zero to round-off for any trajectory produced by run().
    """
    if traj.stride != 1:
        raise ValueError("finite-difference replay needs a stride-1 trajectory")
    steps = traj.steps
    if steps < 2:
        raise ValueError("need at least 2 steps to form the residual")
    thetas = traj.thetas
    eta, beta, wd = config.eta, config.beta, config.weight_decay
    grad = _GradientSource(
        traj.model, config, traj.seed, dataset, traj.noise, traj.noise_mode, traj.sampling
    )
    worst = 0.0
    for k in range(steps):
        g = grad(thetas[k])
        if k == 0:
            continue  # consumed for stream alignment; residual needs theta_{k-1}
        r = (thetas[k + 1] - thetas[k]) / eta - beta * (thetas[k] - thetas[k - 1]) / eta
        r += wd * thetas[k] + g
        worst = max(worst, float(np.abs(r).max()))
    return worst


def run_ensemble(
    model: QuadraticModel,
    config: OptimizerConfig,
    steps: int,
    theta0: np.ndarray,
    v0: np.ndarray,
    seed: int,
    noise: NoiseModel,
    basis_vectors: np.ndarray | None = None,
    mu: np.ndarray | None = None,
) -> dict:
    """Vectorized idealized-noise replicas advancing in lockstep.

    theta0 and v0 have shape (R, d). Returns per-step ensemble statistics:
    mean_delta_sq, mean_Delta_sq, mean_loss, mean_reg_loss, mean_kinetic,
    and, when ``basis_vectors`` (d x k) is given, mean/variance of the
    per-mode phase coordinates a = Q^T (theta - mu), b = Q^T v.
    """
    theta = np.array(theta0, dtype=float)
    v = np.array(v0, dtype=float)
    if theta.ndim != 2 or theta.shape != v.shape:
        raise ValueError("theta0 and v0 must be (R, d) arrays of equal shape")
    R, d = theta.shape
    eta, beta, wd = config.eta, config.beta, config.weight_decay
    H, b_vec = model.H, model.b
    M = noise_sqrt(model, noise, config.batch_size)
    rng = np.random.default_rng(seed)
    theta_start = theta.copy()
    mu_c = model.mu if mu is None else np.asarray(mu, dtype=float)

    out = {
        "mean_delta_sq": np.empty(steps + 1),
        "mean_Delta_sq": np.empty(steps + 1),
        "mean_loss": np.empty(steps + 1),
        "mean_reg_loss": np.empty(steps + 1),
        "mean_kinetic": np.empty(steps + 1),
    }
    track_modes = basis_vectors is not None
    if track_modes:
        kmodes = basis_vectors.shape[1]
        for key in ("mean_a", "mean_b", "var_a", "var_b"):
            out[key] = np.empty((steps + 1, kmodes))

    half_mass = 0.5 * config.mass

    def record(k: int) -> None:
        vsq = np.einsum("ij,ij->i", v, v)
        out["mean_delta_sq"][k] = eta**2 * vsq.mean()
        diff = theta - theta_start
        out["mean_Delta_sq"][k] = np.einsum("ij,ij->i", diff, diff).mean()
        out["mean_loss"][k] = (
            0.5 * np.einsum("ij,ij->i", theta @ H, theta) - theta @ b_vec
        ).mean() + model.loss_offset
        dv = theta - mu_c
        out["mean_reg_loss"][k] = (
            0.5 * np.einsum("ij,ij->i", dv @ H, dv)
            + 0.5 * wd * np.einsum("ij,ij->i", theta, theta)
        ).mean()
        out["mean_kinetic"][k] = half_mass * vsq.mean()
        if track_modes:
            a = (theta - mu_c) @ basis_vectors
            bb = v @ basis_vectors
            out["mean_a"][k] = a.mean(axis=0)
            out["mean_b"][k] = bb.mean(axis=0)
            out["var_a"][k] = a.var(axis=0)
            out["var_b"][k] = bb.var(axis=0)

    record(0)
    for k in range(1, steps + 1):
        g = theta @ H - b_vec + rng.standard_normal((R, d)) @ M
        v = beta * v - g - wd * theta
        theta = theta + eta * v
        if k % 256 == 0 and not np.isfinite(theta).all():
            raise DivergenceError(step=k, last_state=PhaseState(theta_start[0], v0[0], 0))
        record(k)
    if not np.isfinite(theta).all():
        raise DivergenceError(step=steps, last_state=PhaseState(theta_start[0], v0[0], 0))
    return out


def stationary_statistics(
    model: QuadraticModel,
    config: OptimizerConfig,
    noise: NoiseModel,
    steps: int,
    burn_in: int,
    theta0: np.ndarray,
    v0: np.ndarray,
    seed: int,
    chunk: int = 4096,
) -> dict:
    """Long-run moment accumulation for a single idealized-noise trajectory.

    Runs the same update kernel as run() but accumulates first and second
    moments of (theta, v) plus scalar energy statistics instead of storing
    the path, so million-step runs stay cheap. Burn-in steps are executed
    but not accumulated. Returns means, covariances, and time averages of
    ||delta||^2, the regularized quadratic loss, and the kinetic energy.
    """
    if steps < 1 or burn_in < 0:
        raise ValueError("need steps >= 1 and burn_in >= 0")
    theta = np.array(theta0, dtype=float)
    v = np.array(v0, dtype=float)
    d = theta.size
    eta, beta, wd = config.eta, config.beta, config.weight_decay
    H, b_vec, mu = model.H, model.b, model.mu
    M = noise_sqrt(model, noise, config.batch_size)
    rng = np.random.default_rng(seed)

    sum_theta = np.zeros(d)
    sum_v = np.zeros(d)
    gram_theta = np.zeros((d, d))
    gram_v = np.zeros((d, d))
    sum_delta_sq = 0.0
    sum_reg_loss = 0.0
    sum_kinetic = 0.0
    half_mass = 0.5 * config.mass
    buf_theta = np.empty((chunk, d))
    buf_v = np.empty((chunk, d))

    done = 0
    total = burn_in + steps
    while done < total:
        now = min(chunk, total - done)
        xi = rng.standard_normal((now, d)) @ M
        fill = 0
        for i in range(now):
            g = H @ theta - b_vec + xi[i]
            v = beta * v - g - wd * theta
            theta = theta + eta * v
            if done + i + 1 > burn_in:
                buf_theta[fill] = theta
                buf_v[fill] = v
                fill += 1
        if fill:
            bt, bv = buf_theta[:fill], buf_v[:fill]
            sum_theta += bt.sum(axis=0)
            sum_v += bv.sum(axis=0)
            gram_theta += bt.T @ bt
            gram_v += bv.T @ bv
            vsq = np.einsum("ij,ij->i", bv, bv)
            sum_delta_sq += eta**2 * vsq.sum()
            sum_kinetic += half_mass * vsq.sum()
            dv = bt - mu
            sum_reg_loss += (
                0.5 * np.einsum("ij,ij->i", dv @ H, dv)
                + 0.5 * wd * np.einsum("ij,ij->i", bt, bt)
            ).sum()
        done += now
        if not np.isfinite(theta).all():
            raise DivergenceError(step=done, last_state=PhaseState(np.zeros(d), np.zeros(d), done))

    mean_theta = sum_theta / steps
    mean_v = sum_v / steps
    return {
        "mean_theta": mean_theta,
        "mean_v": mean_v,
        "cov_theta": gram_theta / steps - np.outer(mean_theta, mean_theta),
        "cov_v": gram_v / steps - np.outer(mean_v, mean_v),
        "mean_delta_sq": sum_delta_sq / steps,
        "mean_reg_loss": sum_reg_loss / steps,
        "mean_kinetic": sum_kinetic / steps,
        "samples": steps,
    }


def write_trajectory_csv(
    traj: TrajectoryRecord,
    path: str | Path,
    basis_vectors: np.ndarray | None = None,
    mu: np.ndarray | None = None,
) -> None:
    """Write one row per executed step: step, t, loss, delta_sq, Delta_sq[, a_i, b_i].

    Eigenplane projections are emitted when the trajectory holds stride-1
    states and a basis is supplied.
    """
    eta = traj.config.eta
    header = ["step", "t", "loss", "delta_sq", "Delta_sq"]
    project = basis_vectors is not None and traj.stride == 1
    if project:
        kmodes = basis_vectors.shape[1]
        header += [f"a_{i+1}" for i in range(kmodes)] + [f"b_{i+1}" for i in range(kmodes)]
        mu_c = traj.model.mu if mu is None else np.asarray(mu, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(1, traj.steps + 1):
            row = [
                k,
                repr(eta * k),
                repr(traj.loss[k]),
                repr(traj.delta_sq[k]),
                repr(traj.Delta_sq[k]),
            ]
            if project:
                a = basis_vectors.T @ (traj.thetas[k] - mu_c)
                b = basis_vectors.T @ traj.vels[k]
                row += [repr(x) for x in a] + [repr(x) for x in b]
            writer.writerow(row)
