"""Displacement statistics of the stationary dynamics.

The per-step squared displacement satisfies

    E||delta||^2 = eta^2 sigma_sq tr(H) / (S (1 - beta^2)),

and the stationary squared displacement after t steps is

    E||Delta_t||^2 = pref * ( tr(H) t
                     + 2 t sum_{k=1..t} (1 - k/t) sum_l rho_l C_l(k) ),

with pref = eta^2 sigma_sq / (S (1 - beta^2)) and C_l the normalized
stationary velocity autocorrelation of mode l, a damped-oscillator
trigonometric function of the lag. Lags are mapped to continuous time
tau = eta * k by default (a step-unit mode is available behind a flag).
The log-log slope of the resulting curve is the diffusion exponent:
1 for Brownian scaling, 2 for coherent transport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problem import NoiseModel, QuadraticModel
from .simulate import OptimizerConfig
from .ou_theory import ModeBlock, Regime, make_mode_block


class FitError(ValueError):
    """Power-law fit rejected the input window."""


@dataclass(frozen=True)
class DiffusionReport:
    """Summary of predicted displacement statistics for one configuration."""

    expected_delta_sq: float
    msd_curve: np.ndarray  # (n, 2) rows of (t_steps, E||Delta_t||^2)
    fitted_exponent: float
    fit_amplitude: float
    fit_window: tuple[float, int]
    damping_ratios: np.ndarray
    regime_counts: dict


def expected_local_displacement(config: OptimizerConfig, sigma_sq_tr_h: float) -> float:
    """Stationary mean of ||delta||^2 given the noise-weighted trace sigma_sq * tr(H)."""
    if sigma_sq_tr_h <= 0:
        raise ValueError("sigma_sq_tr_h must be positive")
    return config.eta**2 * sigma_sq_tr_h / config.kappa


def estimate_sigma_tr_h(measured_delta_sq: float, config: OptimizerConfig) -> float:
    """Invert the speed law: one measured mean ||delta||^2 yields sigma_sq * tr(H)."""
    if measured_delta_sq <= 0:
        raise ValueError("measured mean squared displacement must be positive")
    return measured_delta_sq * config.kappa / config.eta**2


def _autocorrelation(block: ModeBlock, taus: np.ndarray) -> np.ndarray:
    """Vectorized C(tau): velocity entry of the mode propagator."""
    g, al = block.gamma, block.alpha
    if block.regime is Regime.CRITICAL:
        return np.exp(-g * taus) * (1.0 - g * taus)
    if block.regime is Regime.OVERDAMPED:
        p = np.exp(-(g - al) * taus)
        q = np.exp(-(g + al) * taus)
        return 0.5 * (p + q) - (g / al) * 0.5 * (p - q)
    e = np.exp(-g * taus)
    return e * (np.cos(al * taus) - (g / al) * np.sin(al * taus))


def velocity_autocorrelation(block: ModeBlock, lag: float) -> float:
    """Normalized stationary velocity autocovariance of one mode at a continuous lag."""
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    return float(_autocorrelation(block, np.asarray([lag]))[0])


def _mode_weighted_autocorrelation(
    spectrum: np.ndarray,
    config: OptimizerConfig,
    lags: np.ndarray,
    autocorrelation,
) -> np.ndarray:
    """sum_l rho_l C_l at each lag; ``autocorrelation`` overrides C when given."""
    if autocorrelation is None:
        total = np.zeros_like(lags, dtype=float)
        for rho in spectrum:
            total += rho * _autocorrelation(make_mode_block(float(rho), config), lags)
        return total
    if np.isscalar(autocorrelation):
        return float(autocorrelation) * np.full(lags.shape, spectrum.sum())
    total = np.zeros_like(lags, dtype=float)
    for rho in spectrum:
        total += rho * np.asarray(
            autocorrelation(lags, make_mode_block(float(rho), config)), dtype=float
        )
    return total


def global_displacement_curve(
    spectrum: np.ndarray,
    config: OptimizerConfig,
    sigma_sq: float,
    horizon: int,
    ts: np.ndarray | None = None,
    autocorrelation=None,
    lag_in_steps: bool = False,
) -> np.ndarray:
    """E||Delta_t||^2 for t = 1..horizon (or the requested subset ``ts``).

    Returns an (n, 2) array of (t, value). Cost is O(horizon * modes) via
    cumulative sums, so a log-spaced ``ts`` costs the same as the full grid.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    spectrum = np.asarray(spectrum, dtype=float)
    ks = np.arange(1, horizon + 1, dtype=float)
    lags = ks if lag_in_steps else config.eta * ks
    weighted = _mode_weighted_autocorrelation(spectrum, config, lags, autocorrelation)
    cum = np.cumsum(weighted)
    cum_k = np.cumsum(ks * weighted)
    tr_h = spectrum.sum()
    pref = config.eta**2 * sigma_sq / config.kappa
    values = pref * (tr_h * ks + 2.0 * (ks * cum - cum_k))
    if ts is None:
        return np.column_stack([ks, values])
    ts = np.asarray(ts, dtype=int)
    if ts.min() < 1 or ts.max() > horizon:
        raise ValueError("requested times must lie in [1, horizon]")
    return np.column_stack([ts.astype(float), values[ts - 1]])


def expected_global_displacement(
    spectrum: np.ndarray,
    config: OptimizerConfig,
    sigma_sq: float,
    t: int,
    autocorrelation=None,
    lag_in_steps: bool = False,
) -> float:
    """Stationary E||Delta_t||^2 after t steps.

    ``autocorrelation`` replaces the physical C_l when given: a constant
    (0 recovers pure Brownian scaling, 1 coherent transport) or a callable
    (lags, block) -> values.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    curve = global_displacement_curve(
        spectrum, config, sigma_sq, t, ts=np.asarray([t]),
        autocorrelation=autocorrelation, lag_in_steps=lag_in_steps,
    )
    return float(curve[0, 1])


def fit_power_law(msd, window_start_fraction: float = 1.0 / 3.0) -> tuple[float, float]:
    """Least-squares line on (log t, log value) over the trailing window.

    The window keeps the points from index floor(n * window_start_fraction)
    on. Returns (exponent, amplitude) where the fitted curve is
    amplitude * t^exponent.
    """
    arr = np.asarray(msd, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitError("msd must be a sequence of (t, value) pairs")
    if not 0.0 <= window_start_fraction < 1.0:
        raise FitError("window_start_fraction must lie in [0, 1)")
    start = int(math.floor(len(arr) * window_start_fraction))
    window = arr[start:]
    if len(window) < 10:
        raise FitError(f"need at least 10 points in the fit window, got {len(window)}")
    t, val = window[:, 0], window[:, 1]
    if (t <= 0).any() or (val <= 0).any():
        raise FitError("fit window contains nonpositive times or values")
    slope, intercept = np.polyfit(np.log(t), np.log(val), 1)
    return float(slope), float(math.exp(intercept))


def damping_profile(
    spectrum: np.ndarray, config: OptimizerConfig
) -> tuple[np.ndarray, list[Regime]]:
    """Per-mode damping ratios zeta_l = gamma / omega_l with regime labels."""
    spectrum = np.asarray(spectrum, dtype=float)
    if (spectrum < 0).any():
        raise ValueError("spectrum must be nonnegative")
    blocks = [make_mode_block(float(rho), config) for rho in spectrum]
    return np.asarray([b.zeta for b in blocks]), [b.regime for b in blocks]


def equipartition_report(
    model: QuadraticModel, noise: NoiseModel, config: OptimizerConfig
) -> dict:
    """Stationary expectations of the regularized loss and kinetic energy.

    expected_loss = expected_kinetic + offset holds exactly by construction,
    with offset = (weight_decay / 2) ||mu||^2 and

        expected_kinetic = eta sigma_sq tr(H) / (4 S (1 - beta)).
    """
    tr_h = float(np.trace(model.H))
    kinetic = config.eta * noise.sigma_sq * tr_h / (4 * config.batch_size * (1 - config.beta))
    offset = 0.5 * config.weight_decay * float(model.mu @ model.mu)
    return {
        "expected_loss": kinetic + offset,
        "expected_kinetic": kinetic,
        "offset": offset,
    }


def diffusion_report(
    spectrum: np.ndarray,
    config: OptimizerConfig,
    sigma_sq: float,
    horizon: int,
    window_start_fraction: float = 1.0 / 3.0,
    lag_in_steps: bool = False,
) -> DiffusionReport:
    """Predicted displacement summary: speed law, analytic curve, fitted exponent."""
    spectrum = np.asarray(spectrum, dtype=float)
    curve = global_displacement_curve(
        spectrum, config, sigma_sq, horizon, lag_in_steps=lag_in_steps
    )
    c, amplitude = fit_power_law(curve, window_start_fraction)
    zetas, regimes = damping_profile(spectrum, config)
    counts = {
        "over": sum(r is Regime.OVERDAMPED for r in regimes),
        "critical": sum(r is Regime.CRITICAL for r in regimes),
        "under": sum(r is Regime.UNDERDAMPED for r in regimes),
    }
    msd = np.vstack([[0.0, 0.0], curve])
    return DiffusionReport(
        expected_delta_sq=expected_local_displacement(config, sigma_sq * spectrum.sum()),
        msd_curve=msd,
        fitted_exponent=c,
        fit_amplitude=amplitude,
        fit_window=(window_start_fraction, horizon),
        damping_ratios=zetas,
        regime_counts=counts,
    )
