"""Exact phase-space Gaussian model for SGD on a quadratic loss.

The continuous-time limit of the heavy-ball recursion is a linear-drift
Gaussian diffusion in phase space z = [theta; v]:

    dz = -A (z - [mu; 0]) dt + sqrt(2 kappa^{-1} D) dW_t,

with drift and diffusion blocks (c = 2 / (eta (1 + beta)))

    A = [[0, -I], [c (H + wd I), c (1 - beta) I]]
    D = [[0,  0], [0, c (1 - beta) sigma_sq H]].

In the eigenbasis of H the dynamics decouple into independent 2x2 damped
oscillators with friction gamma = (1-beta)/(eta(1+beta)) and natural
frequency omega_l = sqrt(2 (rho_l + wd) / (eta (1+beta))). All production
evaluations use the per-mode closed forms; dense matrix exponentials and
quadrature exist only as test oracles.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .problem import CovarianceMode, NoiseModel, QuadraticModel
from .simulate import OptimizerConfig
from .spectral import EigenBasis

# Width of the routing band around gamma = omega: inside it the critical
# formulas are used to dodge cancellation in the cosh/cos differences.
CRITICAL_BAND = 1e-7


class Regime(enum.Enum):
    OVERDAMPED = "overdamped"
    CRITICAL = "critical"
    UNDERDAMPED = "underdamped"


@dataclass(frozen=True)
class ModeBlock:
    """Single eigenmode of the phase-space dynamics as a damped oscillator."""

    rho: float
    gamma: float
    omega: float
    alpha: float
    regime: Regime
    zeta: float


def make_mode_block(rho: float, config: OptimizerConfig) -> ModeBlock:
    gamma = config.gamma
    omega = math.sqrt(2.0 * (rho + config.weight_decay) / (config.eta * (1.0 + config.beta)))
    diff = gamma - omega
    if abs(diff) < CRITICAL_BAND * max(gamma, omega):
        regime = Regime.CRITICAL
        alpha = 0.0
    else:
        regime = Regime.OVERDAMPED if diff > 0 else Regime.UNDERDAMPED
        # alpha^2 = gamma^2 - omega^2 factored to keep precision near criticality
        alpha = math.sqrt(abs(diff) * (gamma + omega))
    zeta = gamma / omega if omega > 0 else math.inf
    return ModeBlock(rho=rho, gamma=gamma, omega=omega, alpha=alpha, regime=regime, zeta=zeta)


@dataclass(frozen=True)
class OUModel:
    """Immutable phase-space model: dense A, D plus per-mode blocks."""

    A: np.ndarray  # (2d, 2d)
    D: np.ndarray  # (2d, 2d)
    kappa: float
    mu_phase: np.ndarray  # (2d,)
    modes: list[ModeBlock]
    basis: EigenBasis
    config: OptimizerConfig
    sigma_sq: float

    @property
    def d(self) -> int:
        return len(self.modes)


def assemble_drift_diffusion(
    model: QuadraticModel, noise: NoiseModel, config: OptimizerConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Dense 2d x 2d drift and diffusion matrices of the phase-space SDE."""
    d = model.d
    sigma = noise.covariance(model)
    c = 2.0 / (config.eta * (1.0 + config.beta))
    eye = np.eye(d)
    A = np.zeros((2 * d, 2 * d))
    A[:d, d:] = -eye
    A[d:, :d] = c * (model.H + config.weight_decay * eye)
    A[d:, d:] = c * (1.0 - config.beta) * eye
    D = np.zeros((2 * d, 2 * d))
    D[d:, d:] = c * (1.0 - config.beta) * sigma
    return A, D


def build_ou(
    model: QuadraticModel,
    noise: NoiseModel,
    config: OptimizerConfig,
    basis: EigenBasis,
) -> OUModel:
    """Assemble the phase-space model from a quadratic problem.

    Requires the scaled-Hessian noise model (the covariance must commute
    with the Hessian so both diagonalize in one eigenbasis) and a complete
    eigenbasis (k = d) so the mode decomposition is exact.
    """
    if noise.mode is not CovarianceMode.SCALED_HESSIAN:
        raise ValueError(
            "noise covariance must commute with the Hessian (shared eigenbasis); "
            "only the scaled-Hessian noise model guarantees this"
        )
    d = model.d
    if basis.k != d:
        raise ValueError(f"need a complete eigenbasis (k = d = {d}), got k = {basis.k}")
    sigma = noise.covariance(model)
    comm = model.H @ sigma - sigma @ model.H
    scale = max(np.linalg.norm(model.H @ sigma), np.finfo(float).tiny)
    if np.linalg.norm(comm) > 1e-10 * scale:
        raise ValueError("noise covariance does not commute with the Hessian")

    A, D = assemble_drift_diffusion(model, noise, config)
    modes = [make_mode_block(float(rho), config) for rho in basis.values]
    mu_phase = np.concatenate([model.mu, np.zeros(d)])
    return OUModel(
        A=A,
        D=D,
        kappa=config.kappa,
        mu_phase=mu_phase,
        modes=modes,
        basis=basis,
        config=config,
        sigma_sq=noise.sigma_sq,
    )


def block_exponential(block: ModeBlock, t: float) -> np.ndarray:
    """Closed-form 2x2 propagator exp(-S t) for S = [[0, -1], [omega^2, 2 gamma]].

    Overdamped entries are evaluated from decaying exponentials
    exp(-(gamma -/+ alpha) t) so large t never overflows.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    g, w, al = block.gamma, block.omega, block.alpha
    if block.regime is Regime.CRITICAL:
        e = math.exp(-g * t)
        return np.array([[e * (1 + g * t), e * t], [-e * w**2 * t, e * (1 - g * t)]])
    if block.regime is Regime.OVERDAMPED:
        p = math.exp(-(g - al) * t)
        q = math.exp(-(g + al) * t)
        ch = 0.5 * (p + q)  # = e^{-gt} cosh(al t)
        sh = 0.5 * (p - q)  # = e^{-gt} sinh(al t)
        return np.array(
            [
                [ch + (g / al) * sh, sh / al],
                [-(w**2 / al) * sh, ch - (g / al) * sh],
            ]
        )
    e = math.exp(-g * t)
    cs = e * math.cos(al * t)
    sn = e * math.sin(al * t)
    return np.array(
        [
            [cs + (g / al) * sn, sn / al],
            [-(w**2 / al) * sn, cs - (g / al) * sn],
        ]
    )


def mode_mean(block: ModeBlock, a0: float, b0: float, t: float) -> tuple[float, float]:
    """Deterministic (a, b) coordinates of one mode at time t."""
    E = block_exponential(block, t)
    a = E[0, 0] * a0 + E[0, 1] * b0
    b = E[1, 0] * a0 + E[1, 1] * b0
    return float(a), float(b)


def mean(ou: OUModel, theta0: np.ndarray, v0: np.ndarray, t: float) -> np.ndarray:
    """Expected phase point at time t, assembled from the mode oscillators."""
    Qk = ou.basis.vectors
    a0 = Qk.T @ (np.asarray(theta0, dtype=float) - ou.mu_phase[: ou.d])
    b0 = Qk.T @ np.asarray(v0, dtype=float)
    a = np.empty(ou.d)
    b = np.empty(ou.d)
    for l, block in enumerate(ou.modes):
        a[l], b[l] = mode_mean(block, a0[l], b0[l], t)
    out = ou.mu_phase.copy()
    out[: ou.d] += Qk @ a
    out[ou.d :] += Qk @ b
    return out


def stationary_blocks(ou: OUModel) -> np.ndarray:
    """(d, 2, 2) stationary covariance blocks, diag per mode:

    Var(a_l) = eta sigma_sq rho_l / (2 S (1-beta) (rho_l + wd)),
    Var(b_l) = sigma_sq rho_l / (S (1-beta^2)).
    """
    cfg = ou.config
    S = cfg.batch_size
    out = np.zeros((ou.d, 2, 2))
    for l, block in enumerate(ou.modes):
        rho = block.rho
        denom = rho + cfg.weight_decay
        pos = 0.0 if denom == 0 else cfg.eta * ou.sigma_sq * rho / (2 * S * (1 - cfg.beta) * denom)
        vel = ou.sigma_sq * rho / (S * (1 - cfg.beta**2))
        out[l, 0, 0] = pos
        out[l, 1, 1] = vel
    return out


def variance(ou: OUModel, t: float) -> np.ndarray:
    """(d, 2, 2) time-t covariance blocks from a deterministic start:

    Var_l(t) = SS_l - E_l(t) SS_l E_l(t)^T with SS_l the stationary block.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    ss = stationary_blocks(ou)
    out = np.empty_like(ss)
    for l, block in enumerate(ou.modes):
        E = block_exponential(block, t)
        out[l] = ss[l] - E @ ss[l] @ E.T
    return out


def cross_covariance(ou: OUModel, t: float, s: float) -> np.ndarray:
    """(d, 2, 2) cross-covariance blocks Cov(z_t, z_s) for 0 <= t <= s.

    Equals Var_l(t) E_l(s - t)^T; at stationarity (t -> inf) this reduces
    to SS_l E_l(lag)^T.
    """
    if t > s:
        raise ValueError("need t <= s; reorder the arguments")
    var_t = variance(ou, t)
    out = np.empty_like(var_t)
    for l, block in enumerate(ou.modes):
        E = block_exponential(block, s - t)
        out[l] = var_t[l] @ E.T
    return out


def _block_sqrts(blocks: np.ndarray) -> np.ndarray:
    """Symmetric square roots of a (d, 2, 2) stack of PSD blocks."""
    vals, vecs = np.linalg.eigh(blocks)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)[:, None, :] @ np.swapaxes(vecs, 1, 2)


def _assemble_samples(ou: OUModel, coords: np.ndarray) -> np.ndarray:
    """Map (n, d, 2) mode coordinates to (n, 2d) phase points around the center."""
    Qk = ou.basis.vectors
    n = coords.shape[0]
    out = np.tile(ou.mu_phase, (n, 1))
    out[:, : ou.d] += coords[:, :, 0] @ Qk.T
    out[:, ou.d :] += coords[:, :, 1] @ Qk.T
    return out


def sample_exact(
    ou: OUModel,
    theta0: np.ndarray,
    v0: np.ndarray,
    t: float,
    n: int,
    seed: int = 0,
) -> np.ndarray:
    """n i.i.d. draws of the exact time-t Gaussian law; no path discretization.

    Returns an (n, 2d) array of phase points.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    Qk = ou.basis.vectors
    a0 = Qk.T @ (np.asarray(theta0, dtype=float) - ou.mu_phase[: ou.d])
    b0 = Qk.T @ np.asarray(v0, dtype=float)
    means = np.empty((ou.d, 2))
    for l, block in enumerate(ou.modes):
        means[l] = mode_mean(block, a0[l], b0[l], t)
    roots = _block_sqrts(variance(ou, t))
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, ou.d, 2))
    coords = means[None, :, :] + np.einsum("lij,nlj->nli", roots, xi)
    return _assemble_samples(ou, coords)


def sample_stationary(ou: OUModel, n: int, seed: int = 0) -> np.ndarray:
    """n i.i.d. draws from the stationary Gaussian law, shape (n, 2d)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    roots = _block_sqrts(stationary_blocks(ou))
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, ou.d, 2))
    coords = np.einsum("lij,nlj->nli", roots, xi)
    return _assemble_samples(ou, coords)


def write_theory_csv(
    ou: OUModel,
    theta0: np.ndarray,
    v0: np.ndarray,
    times: np.ndarray,
    modes: list[int],
    path: str | Path,
) -> None:
    """Analytic curves per requested mode: t, mode, a_mean, b_mean, var_aa, var_ab, var_bb."""
    Qk = ou.basis.vectors
    a0 = Qk.T @ (np.asarray(theta0, dtype=float) - ou.mu_phase[: ou.d])
    b0 = Qk.T @ np.asarray(v0, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mode", "a_mean", "b_mean", "var_aa", "var_ab", "var_bb"])
        for t in times:
            var_t = variance(ou, float(t))
            for l in modes:
                a, b = mode_mean(ou.modes[l], a0[l], b0[l], float(t))
                writer.writerow(
                    [
                        repr(float(t)),
                        l + 1,
                        repr(a),
                        repr(b),
                        repr(var_t[l, 0, 0]),
                        repr(var_t[l, 0, 1]),
                        repr(var_t[l, 1, 1]),
                    ]
                )
