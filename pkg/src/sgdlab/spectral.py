"""Top-k curvature eigenpairs from matrix-vector products.

Uses block power iteration with per-sweep re-orthonormalization and a
Rayleigh-Ritz rotation. Products H v can be formed either from a dense
QuadraticModel or matrix-free from a dataset as X^T (X v) / N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .problem import QuadraticModel, RegressionDataset


@dataclass(frozen=True)
class EigenBasis:
    """Orthonormal top-k eigenvectors with eigenvalues and residual norms."""

    vectors: np.ndarray  # (d, k), columns q_1..q_k
    values: np.ndarray  # (k,), non-increasing
    residuals: np.ndarray  # (k,), ||H q_i - rho_i q_i||
    seed: int | None = None
    iterations: int | None = None

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    @property
    def d(self) -> int:
        return self.vectors.shape[0]


def _apply_block(operator: QuadraticModel | RegressionDataset, block: np.ndarray) -> np.ndarray:
    if isinstance(operator, RegressionDataset):
        return operator.X.T @ (operator.X @ block) / operator.n
    return operator.H @ block


def hvp(operator: QuadraticModel | RegressionDataset, v: np.ndarray) -> np.ndarray:
    """Curvature-vector product H v.

    Given a dataset, avoids materializing H by evaluating X^T (X v) / N.
    """
    v = np.asarray(v, dtype=float)
    d = operator.d
    if v.shape != (d,):
        raise ValueError(f"v must have shape ({d},), got {v.shape}")
    return _apply_block(operator, v)


def subspace_iteration(
    operator: QuadraticModel | RegressionDataset,
    k: int,
    max_iters: int = 10,
    tol: float = 1e-9,
    seed: int = 0,
    oversample: int = 10,
) -> EigenBasis:
    """Top-k eigenpairs of H by orthonormalized block power iteration.

    Iterates on a block of min(d, k + oversample) columns seeded from a
    Gaussian draw; each sweep applies H, re-orthonormalizes by QR, and
    rotates to the Ritz basis of the projected operator. Stops early when
    every per-column residual drops below tol * rho_1; otherwise the
    returned residuals report the achieved quality (non-convergence is not
    an error).
    """
    d = operator.d
    if not 1 <= k <= d:
        raise ValueError(f"k must satisfy 1 <= k <= {d}, got {k}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = min(d, k + max(0, oversample))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, m)))

    values = np.zeros(m)
    residual_vecs = np.zeros((d, m))
    iters_done = 0
    for it in range(max_iters):
        Z = _apply_block(operator, Q)
        Q, _ = np.linalg.qr(Z)
        HQ = _apply_block(operator, Q)
        T = Q.T @ HQ
        T = 0.5 * (T + T.T)
        ritz, W = np.linalg.eigh(T)
        order = np.argsort(ritz)[::-1]
        ritz, W = ritz[order], W[:, order]
        Q = Q @ W
        values = ritz
        residual_vecs = HQ @ W - Q * ritz
        iters_done = it + 1
        res = np.linalg.norm(residual_vecs, axis=0)
        if res[:k].max() <= tol * max(values[0], np.finfo(float).tiny):
            break

    res = np.linalg.norm(residual_vecs, axis=0)
    return EigenBasis(
        vectors=Q[:, :k].copy(),
        values=values[:k].copy(),
        residuals=res[:k].copy(),
        seed=seed,
        iterations=iters_done,
    )


def project_phase(
    basis: EigenBasis,
    theta: np.ndarray,
    v: np.ndarray,
    mu: np.ndarray,
    index: int,
) -> tuple[float, float]:
    """Coordinates of a phase point in the eigenplane of mode ``index``.

    Returns (a, b) = (q_i^T (theta - mu), q_i^T v).
    """
    if not 0 <= index < basis.k:
        raise IndexError(f"mode index {index} out of range for k={basis.k}")
    q = basis.vectors[:, index]
    a = float(q @ (np.asarray(theta, dtype=float) - np.asarray(mu, dtype=float)))
    b = float(q @ np.asarray(v, dtype=float))
    return a, b


def project_phase_all(
    basis: EigenBasis, theta: np.ndarray, v: np.ndarray, mu: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(a, b) coordinates for every mode at once; a, b have shape (k,)."""
    Qk = basis.vectors
    a = Qk.T @ (np.asarray(theta, dtype=float) - np.asarray(mu, dtype=float))
    b = Qk.T @ np.asarray(v, dtype=float)
    return a, b


def save_basis(basis: EigenBasis, path: str | Path) -> None:
    """Persist to <path>.npz with a JSON sidecar <path>.json."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), vectors=basis.vectors)
    meta = {
        "k": basis.k,
        "values": basis.values.tolist(),
        "residuals": basis.residuals.tolist(),
        "seed": basis.seed,
        "iters": basis.iterations,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_basis(path: str | Path) -> EigenBasis:
    path = Path(path)
    arrays = np.load(path.with_suffix(".npz"))
    meta = json.loads(path.with_suffix(".json").read_text())
    return EigenBasis(
        vectors=arrays["vectors"],
        values=np.asarray(meta["values"], dtype=float),
        residuals=np.asarray(meta["residuals"], dtype=float),
        seed=meta.get("seed"),
        iterations=meta.get("iters"),
    )
