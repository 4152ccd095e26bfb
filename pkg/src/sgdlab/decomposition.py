"""Splitting the phase-space drift into diffusive and circulating parts.

The drift matrix factors uniquely as A = (D + Q) U with Q skew-symmetric and
U symmetric positive definite; B = U^{-1} then solves the Lyapunov equation
A B + B A^T = 2 D. The quadratic form Psi(z) = (z - center)^T (U/2) (z - center)
is the effective potential whose Gibbs density exp(-kappa Psi) is the
stationary law, and j(z) = -Q U (z - center) is the divergence-free velocity
field of the stationary probability current J = j * p_ss.

Two independent construction routes are provided: a general eigendecomposition
route for any diagonalizable drift, and the closed-form blocks for the
scaled-Hessian SGD model. They must agree, and every Decomposition carries
residual certificates for the Lyapunov, reconstruction, and skewness
identities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .problem import CovarianceMode, NoiseModel, QuadraticModel
from .simulate import OptimizerConfig
from .spectral import EigenBasis
from .ou_theory import assemble_drift_diffusion

_TINY = np.finfo(float).tiny


class DecompositionError(ValueError):
    """The (A, D) pair does not admit the skew/symmetric splitting."""


class Balance(enum.Enum):
    DETAILED_BALANCE = "detailed_balance"
    BROKEN_DETAILED_BALANCE = "broken_detailed_balance"


@dataclass(frozen=True)
class Decomposition:
    """A = (D + Q) U splitting with residual certificates.

    ``vectors`` is None when the matrices live in the original phase
    coordinates; otherwise they live in the coordinates of the given d x k
    eigenbasis (positions then velocities). ``center`` is the full-space
    phase center [mu; 0] when known.
    """

    Q: np.ndarray
    U: np.ndarray
    B: np.ndarray
    residuals: dict
    A: np.ndarray | None = None
    D: np.ndarray | None = None
    center: np.ndarray | None = None
    vectors: np.ndarray | None = None


@dataclass(frozen=True)
class ModifiedLoss:
    """Quadratic effective-potential surface split into position/velocity parts."""

    center: np.ndarray
    curvature: np.ndarray  # U / 2
    position_part: np.ndarray
    velocity_part: np.ndarray


def _residual_certificates(
    A: np.ndarray, D: np.ndarray, Q: np.ndarray, U: np.ndarray, B: np.ndarray
) -> dict:
    nQ = np.linalg.norm(Q)
    return {
        "lyapunov": float(
            np.linalg.norm(A @ B + B @ A.T - 2 * D) / max(np.linalg.norm(D), _TINY)
        ),
        "reconstruction": float(
            np.linalg.norm(A - (D + Q) @ U) / max(np.linalg.norm(A), _TINY)
        ),
        "skew": float(np.linalg.norm(Q + Q.T) / nQ) if nQ > 0 else 0.0,
    }


def kwon_decompose(A: np.ndarray, D: np.ndarray) -> Decomposition:
    """Split a diagonalizable drift A against a symmetric diffusion D.

    With A = V diag(lam) V^{-1}, the skew part in the eigen-coordinates is
    Qt_ij = (lam_i - lam_j) / (lam_i + lam_j) * Dt_ij for Dt = V^{-1} D V^{-T},
    then Q = V Qt V^T and U = (D + Q)^{-1} A. Requires lam_i + lam_j != 0 for
    every pair and an invertible D + Q.
    """
    A = np.asarray(A, dtype=float)
    D = np.asarray(D, dtype=float)
    if A.shape != D.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A and D must be square matrices of equal shape")
    lam, V = scipy.linalg.eig(A)
    scale = np.abs(lam).max()
    pair_sums = lam[:, None] + lam[None, :]
    if np.abs(pair_sums).min() <= 1e-12 * max(scale, _TINY):
        raise DecompositionError(
            "drift eigenvalues contain a pair summing to zero; the splitting is singular"
        )
    W = np.linalg.inv(V)
    Dt = W @ D @ W.T
    Qt = (lam[:, None] - lam[None, :]) / pair_sums * Dt
    Q = V @ Qt @ V.T
    if np.abs(Q.imag).max() > 1e-8 * max(np.abs(Q.real).max(), 1.0):
        raise DecompositionError("skew part came out non-real; drift is too ill-conditioned")
    Q = Q.real
    Q = 0.5 * (Q - Q.T)  # exact skewness
    M = D + Q
    try:
        U = np.linalg.solve(M, A)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(
            "D + Q is singular; the splitting A = (D + Q) U is undefined for this pair"
        ) from exc
    if not np.isfinite(U).all():
        raise DecompositionError("D + Q is numerically singular")
    U = 0.5 * (U + U.T)
    B = np.linalg.inv(U)
    B = 0.5 * (B + B.T)
    return Decomposition(
        Q=Q, U=U, B=B, residuals=_residual_certificates(A, D, Q, U, B), A=A, D=D
    )


def _eigh_basis(model: QuadraticModel) -> EigenBasis:
    vals, vecs = np.linalg.eigh(model.H)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    res = np.linalg.norm(model.H @ vecs - vecs * vals, axis=0)
    return EigenBasis(vectors=vecs, values=vals, residuals=res)


def closed_form_qu(
    model: QuadraticModel,
    noise: NoiseModel,
    config: OptimizerConfig,
    basis: EigenBasis | None = None,
) -> Decomposition:
    """Closed-form splitting for the scaled-Hessian SGD model.

    Per mode (curvature rho, noise scale s2 = sigma_sq, c = 2/(eta(1+beta))):

        Q_l = [[0, -s2 rho], [s2 rho, 0]]
        U_l = diag(c (rho + wd) / (s2 rho), 1 / (s2 rho))

    assembled in the original coordinates when the basis is complete, or in
    the top-k eigen-coordinates otherwise. Zero curvature eigenvalues make
    U singular; pass a basis restricted to the positive part of the spectrum.
    """
    if noise.mode is not CovarianceMode.SCALED_HESSIAN:
        raise ValueError("closed forms require the scaled-Hessian noise model")
    s2 = noise.sigma_sq
    if s2 <= 0:
        raise DecompositionError("noise scale sigma_sq must be positive for the splitting")
    if basis is None:
        basis = _eigh_basis(model)
    rho = np.asarray(basis.values, dtype=float)
    if rho.min() <= 1e-12 * max(rho.max(), _TINY):
        raise DecompositionError(
            "zero curvature eigenvalues present; restrict to the positive spectrum "
            "by passing a top-k eigenbasis"
        )
    k = basis.k
    wd = config.weight_decay
    c = 2.0 / (config.eta * (1.0 + config.beta))
    u_pos = c * (rho + wd) / (s2 * rho)
    u_vel = 1.0 / (s2 * rho)
    full = k == model.d

    if full:
        Qk = basis.vectors
        sigma = s2 * model.H
        U_pos = (Qk * u_pos) @ Qk.T
        U_vel = (Qk * u_vel) @ Qk.T
        B_pos = (Qk / u_pos) @ Qk.T
        B_vel = (Qk / u_vel) @ Qk.T
        vectors = None
    else:
        sigma = np.diag(s2 * rho)
        U_pos, U_vel = np.diag(u_pos), np.diag(u_vel)
        B_pos, B_vel = np.diag(1.0 / u_pos), np.diag(1.0 / u_vel)
        vectors = basis.vectors

    Z = np.zeros((k, k) if not full else (model.d, model.d))
    Q = np.block([[Z, -sigma], [sigma, Z]])
    U = np.block([[U_pos, Z], [Z, U_vel]])
    B = np.block([[B_pos, Z], [Z, B_vel]])

    if full:
        A, D = assemble_drift_diffusion(model, noise, config)
    else:
        rk = np.diag(rho)
        eye = np.eye(k)
        A = np.block([[Z, -eye], [c * (rk + wd * eye), c * (1 - config.beta) * eye]])
        D = np.block([[Z, Z], [Z, c * (1 - config.beta) * s2 * rk]])

    center = np.concatenate([model.mu, np.zeros(model.d)])
    return Decomposition(
        Q=Q,
        U=U,
        B=B,
        residuals=_residual_certificates(A, D, Q, U, B),
        A=A,
        D=D,
        center=center,
        vectors=vectors,
    )


def _deviation(dec: Decomposition, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Phase deviation from the center in the decomposition's coordinates."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    if dec.center is not None:
        d = dec.center.size // 2
        dtheta = theta - dec.center[:d]
        dv = v - dec.center[d:]
    else:
        dtheta, dv = theta, v
    if dec.vectors is not None:
        dtheta = dec.vectors.T @ dtheta
        dv = dec.vectors.T @ dv
    z = np.concatenate([dtheta, dv])
    if z.size != dec.U.shape[0]:
        raise ValueError("phase point does not match the decomposition dimensions")
    return z


def modified_loss(dec: Decomposition, theta: np.ndarray, v: np.ndarray) -> float:
    """Effective potential Psi(theta, v) = deviation^T (U/2) deviation."""
    z = _deviation(dec, theta, v)
    return float(0.5 * z @ dec.U @ z)


def modified_loss_parts(dec: Decomposition, theta: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """Additive split (Psi_theta, Psi_v) along the position/velocity blocks."""
    z = _deviation(dec, theta, v)
    half = z.size // 2
    zp = np.concatenate([z[:half], np.zeros(half)])
    zv = np.concatenate([np.zeros(half), z[half:]])
    return float(0.5 * zp @ dec.U @ zp), float(0.5 * zv @ dec.U @ zv)


def modified_loss_surface(dec: Decomposition) -> ModifiedLoss:
    half = dec.U.shape[0] // 2
    center = dec.center if dec.center is not None else np.zeros(2 * half)
    return ModifiedLoss(
        center=center,
        curvature=0.5 * dec.U,
        position_part=0.5 * dec.U[:half, :half],
        velocity_part=0.5 * dec.U[half:, half:],
    )


def probability_current(
    dec: Decomposition,
    model: QuadraticModel,
    config: OptimizerConfig,
    theta: np.ndarray,
    v: np.ndarray,
    density_weight: bool = False,
) -> np.ndarray:
    """Velocity field of the stationary current at a phase point.

    j(theta, v) = [v; -(2/(eta(1+beta))) (H + wd I)(theta - mu)], which equals
    -Q U (z - center). With density_weight=True the field is weighted by the
    unnormalized Gibbs density exp(-kappa Psi).
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    c = 2.0 / (config.eta * (1.0 + config.beta))
    force = -c * (model.H @ (theta - model.mu) + config.weight_decay * (theta - model.mu))
    j = np.concatenate([v, force])
    if density_weight:
        j = j * np.exp(-config.kappa * modified_loss(dec, theta, v))
    return j


def stationarity_certificate(
    dec: Decomposition,
    model: QuadraticModel,
    config: OptimizerConfig,
    n_probe: int = 100,
    seed: int = 0,
) -> dict:
    """Check the stationarity identities on a probe grid.

    Returns scaled residuals: ``orthogonality`` is the worst
    |j^T grad(Psi)| / (||j|| ||grad(Psi)||) over probe points drawn at the
    stationary scale, ``divergence`` is |tr(Q U)| / (||Q|| ||U||), and
    ``balance`` reports whether a nonzero circulating part is present.
    """
    rng = np.random.default_rng(seed)
    m = dec.U.shape[0]
    stds = np.sqrt(np.clip(np.diag(dec.B), 0.0, None) / config.kappa)
    probes = rng.standard_normal((n_probe, m)) * stds  # deviations, dec coordinates

    half = m // 2
    grad_scale = max(np.linalg.norm(dec.U), _TINY)
    worst = 0.0
    for z in probes:
        if dec.vectors is not None:
            dtheta = dec.vectors @ z[:half]
            dv = dec.vectors @ z[half:]
        else:
            dtheta, dv = z[:half], z[half:]
        center = dec.center if dec.center is not None else np.zeros(2 * dtheta.size)
        d = center.size // 2
        theta = center[:d] + dtheta
        v = center[d:] + dv
        grad_psi = dec.U @ z  # dec coordinates
        j = probability_current(dec, model, config, theta, v)
        if dec.vectors is not None:
            j_coords = np.concatenate([dec.vectors.T @ j[:d], dec.vectors.T @ j[d:]])
        else:
            j_coords = j
        denom = max(np.linalg.norm(j_coords) * np.linalg.norm(grad_psi), _TINY)
        worst = max(worst, float(abs(j_coords @ grad_psi)) / denom)

    nQ, nU = np.linalg.norm(dec.Q), np.linalg.norm(dec.U)
    divergence = float(abs(np.trace(dec.Q @ dec.U)) / max(nQ * nU, _TINY))
    diff_scale = np.linalg.norm(dec.D + dec.Q) if dec.D is not None else nQ
    broken = nQ > 1e-9 * max(diff_scale, _TINY)
    return {
        "orthogonality": worst,
        "divergence": divergence,
        "balance": Balance.BROKEN_DETAILED_BALANCE if broken else Balance.DETAILED_BALANCE,
    }


def certificate_json(dec: Decomposition, cert: dict) -> dict:
    """Flatten residuals and stationarity checks for the certificate file."""
    return {
        "lyapunov_residual": dec.residuals["lyapunov"],
        "reconstruction_residual": dec.residuals["reconstruction"],
        "skew_residual": dec.residuals["skew"],
        "orthogonality": cert["orthogonality"],
        "divergence": cert["divergence"],
        "balance": cert["balance"].value,
    }
