"""Experiment harness: simulate / compare / sweep / decompose / theory / fit.

All commands read a sectioned config file (see config.py), write CSV + JSON
artifacts into the output directory, and are reproducible: rerunning with
the same config produces byte-identical CSV bodies (the manifest carries the
only timestamp). Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import decomposition as dec_mod
from . import diffusion, ou_theory
from .config import ConfigError, ExperimentConfig
from .problem import NoiseModel, build_quadratic, generate_regression
from .simulate import default_burn_in, run, run_ensemble, write_trajectory_csv
from .spectral import subspace_iteration

SWEEP_PARAMS = ("eta", "beta", "batch_size", "lambda")


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get("SGDLAB_WORKERS")
    return max(1, int(env)) if env else 1


def _derive_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


class Lab:
    """Materialized problem objects shared by all commands."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        p = cfg.problem
        scales = np.sqrt(p.target_spectrum())
        self.dataset = generate_regression(
            p.n, p.d, theta_bar=p.theta_bar, sigma_gen=p.sigma_gen, seed=p.seed, scales=scales
        )
        self.model = build_quadratic(self.dataset, cfg.optimizer.weight_decay)
        self.basis = subspace_iteration(self.model, k=p.d, max_iters=2, seed=p.seed)
        self.noise = NoiseModel(sigma_sq=p.sigma_gen**2)
        self.spectrum = self.basis.values

    def theta0(self) -> np.ndarray:
        base = self.model.mu if self.cfg.run.theta0 == "mu" else np.zeros(self.model.d)
        return base + self.cfg.run.theta0_offset * self.basis.vectors[:, 0]

    def burn_in(self) -> int:
        b = self.cfg.run.burn_in
        return default_burn_in(self.cfg.optimizer) if b == -1 else b

    def ou(self) -> ou_theory.OUModel:
        return ou_theory.build_ou(self.model, self.noise, self.cfg.optimizer, self.basis)


def _write_manifest(lab: Lab, out: Path, command: str, extra: dict | None = None) -> None:
    cfg = lab.cfg
    k = cfg.analysis.top_k
    blocks = [ou_theory.make_mode_block(float(r), cfg.optimizer) for r in lab.spectrum[:k]]
    manifest = {
        "command": command,
        "spec_version": config_mod.SPEC_VERSION,
        "config": config_mod.to_text(cfg),
        "derived": {
            "kappa": cfg.optimizer.kappa,
            "gamma": cfg.optimizer.gamma,
            "mass": cfg.optimizer.mass,
            "spectrum": lab.spectrum[:k].tolist(),
            "omega": [b.omega for b in blocks],
            "zeta": [b.zeta for b in blocks],
            "regime": [b.regime.value for b in blocks],
            "burn_in": lab.burn_in(),
        },
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _run_one_replica(lab: Lab, seed_main: int, seed_burn: int):
    cfg = lab.cfg
    theta0, v0 = lab.theta0(), None
    burn = lab.burn_in()
    if burn > 0:
        warm = run(
            lab.dataset, lab.model, cfg.optimizer, burn, theta0, seed_burn,
            stride=burn, noise=lab.noise, noise_mode=cfg.run.noise_mode,
            sampling=cfg.run.sampling,
        )
        theta0, v0 = warm.thetas[-1], warm.vels[-1]
    return run(
        lab.dataset, lab.model, cfg.optimizer, cfg.run.steps, theta0, seed_main,
        stride=cfg.run.stride, v0=v0, noise=lab.noise,
        noise_mode=cfg.run.noise_mode, sampling=cfg.run.sampling,
    )


def cmd_simulate(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    lab = Lab(cfg)
    R = cfg.run.replicas
    seeds = _derive_seeds(cfg.run.seed, 2 * R)
    main_seeds, burn_seeds = seeds[0::2], seeds[1::2]

    def job(r: int):
        traj = _run_one_replica(lab, main_seeds[r], burn_seeds[r])
        kproj = lab.basis.vectors[:, : cfg.analysis.top_k]
        write_trajectory_csv(traj, out / f"traj_{r:03d}.csv", basis_vectors=kproj)
        return traj

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(job, range(R)))
    _write_manifest(lab, out, "simulate", {"seeds": main_seeds, "burn_seeds": burn_seeds})
    return 0


def cmd_theory(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    lab = Lab(cfg)
    ou = lab.ou()
    t_max = cfg.optimizer.eta * cfg.run.steps
    times = np.linspace(0.0, t_max, cfg.analysis.time_points)
    modes = list(range(cfg.analysis.top_k))
    ou_theory.write_theory_csv(ou, lab.theta0(), np.zeros(lab.model.d), times, modes, out / "theory.csv")
    _write_manifest(lab, out, "theory")
    return 0


def _dominant_frequency(signal: np.ndarray, dt: float) -> tuple[float, float]:
    """(peak frequency, bin width) of the demeaned signal."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x))
    if len(spec) < 3:
        return math.nan, math.nan
    spec[0] = 0.0
    freqs = np.fft.rfftfreq(len(x), d=dt)
    return float(freqs[int(np.argmax(spec))]), float(freqs[1])


def cmd_compare(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    lab = Lab(cfg)
    opt = cfg.optimizer
    R, steps = cfg.run.replicas, cfg.run.steps
    k = cfg.analysis.top_k
    theta0 = lab.theta0()
    ou = lab.ou()
    Qk = lab.basis.vectors[:, :k]
    seeds = _derive_seeds(cfg.run.seed, R)

    def job(seed: int):
        traj = run(
            lab.dataset, lab.model, opt, steps, theta0, seed, stride=1,
            noise=lab.noise, noise_mode=cfg.run.noise_mode, sampling=cfg.run.sampling,
        )
        a = (traj.thetas - lab.model.mu) @ Qk
        b = traj.vels @ Qk
        return a, b, traj.delta_sq

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(job, seeds))
    a_all = np.stack([r[0] for r in results])  # (R, steps+1, k)
    b_all = np.stack([r[1] for r in results])
    delta_all = np.stack([r[2] for r in results])
    a_mean, b_mean = a_all.mean(axis=0), b_all.mean(axis=0)
    a_var, b_var = a_all.var(axis=0), b_all.var(axis=0)

    ts = opt.eta * np.arange(steps + 1)
    a0 = Qk.T @ (theta0 - lab.model.mu)
    a_th = np.empty((steps + 1, k))
    b_th = np.empty((steps + 1, k))
    va_th = np.empty((steps + 1, k))
    vb_th = np.empty((steps + 1, k))
    for i, t in enumerate(ts):
        var_t = ou_theory.variance(ou, float(t))
        for l in range(k):
            a_th[i, l], b_th[i, l] = ou_theory.mode_mean(ou.modes[l], a0[l], 0.0, float(t))
            va_th[i, l], vb_th[i, l] = var_t[l, 0, 0], var_t[l, 1, 1]

    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "t", "mode", "a_sim", "a_theory", "b_sim", "b_theory",
             "var_a_sim", "var_a_theory", "var_b_sim", "var_b_theory"]
        )
        for i in range(steps + 1):
            for l in range(k):
                writer.writerow(
                    [i, repr(ts[i]), l + 1, repr(a_mean[i, l]), repr(a_th[i, l]),
                     repr(b_mean[i, l]), repr(b_th[i, l]), repr(a_var[i, l]),
                     repr(va_th[i, l]), repr(b_var[i, l]), repr(vb_th[i, l])]
                )

    checks = []
    tail = slice((2 * (steps + 1)) // 3, None)
    stochastic = lab.noise.sigma_sq > 0
    for l in range(k):
        rms = math.sqrt(float(np.mean(a_th[:, l] ** 2)))
        if rms > 0:
            rmse = math.sqrt(float(np.mean((a_mean[:, l] - a_th[:, l]) ** 2))) / rms
            checks.append(
                {"name": "mean_rmse", "mode": l + 1, "value": rmse, "tolerance": 0.15,
                 "pass": bool(rmse < 0.15)}
            )
        block = ou.modes[l]
        f_pred = block.omega / (2 * math.pi)
        n_periods = f_pred * ts[-1]
        if block.regime is ou_theory.Regime.UNDERDAMPED and n_periods >= 2 and rms > 0:
            f_meas, f_bin = _dominant_frequency(a_mean[:, l], opt.eta)
            checks.append(
                {"name": "frequency", "mode": l + 1, "value": f_meas, "predicted": f_pred,
                 "tolerance": f_bin, "pass": bool(abs(f_meas - f_pred) <= f_bin)}
            )
        v_sim = float(np.mean(b_var[tail, l]))
        v_th = float(np.mean(vb_th[tail, l]))
        if stochastic and v_th > 0 and R >= 8:
            dev = abs(v_sim / v_th - 1.0)
            checks.append(
                {"name": "velocity_variance", "mode": l + 1, "value": dev,
                 "tolerance": 0.25, "pass": bool(dev < 0.25)}
            )
        elif not stochastic:
            checks.append(
                {"name": "velocity_variance_zero", "mode": l + 1, "value": v_sim,
                 "tolerance": 0.0, "pass": bool(v_sim == 0.0)}
            )

    measured_delta = float(np.mean(delta_all[:, tail]))
    pred_delta = (
        diffusion.expected_local_displacement(opt, lab.noise.sigma_sq * float(lab.spectrum.sum()))
        if stochastic
        else 0.0
    )
    if stochastic:
        dev = abs(measured_delta / pred_delta - 1.0)
        checks.append(
            {"name": "local_displacement", "value": dev, "tolerance": 0.15,
             "pass": bool(dev < 0.15), "measured": measured_delta, "predicted": pred_delta}
        )
    ensemble_spread = float(a_var.max(initial=0.0)) if not stochastic else None
    if not stochastic:
        checks.append(
            {"name": "ensemble_spread_zero", "value": ensemble_spread, "tolerance": 0.0,
             "pass": bool(ensemble_spread == 0.0)}
        )

    ok = all(c["pass"] for c in checks)
    summary = {
        "passed": ok,
        "checks": checks,
        "max_mean_rmse": max((c["value"] for c in checks if c["name"] == "mean_rmse"), default=None),
        "frequencies": {
            str(c["mode"]): {"measured": c["value"], "predicted": c["predicted"]}
            for c in checks
            if c["name"] == "frequency"
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(lab, out, "compare", {"seeds": seeds})
    return 0 if ok else 1


def _sweep_point(lab: Lab, param: str, value: float, seed: int):
    cfg = lab.cfg
    fields = {"eta": "eta", "beta": "beta", "batch_size": "batch_size", "lambda": "weight_decay"}
    kwargs = {fields[param]: int(value) if param == "batch_size" else float(value)}
    opt = dataclasses.replace(cfg.optimizer, **kwargs)
    model = (
        build_quadratic(lab.dataset, opt.weight_decay)
        if opt.weight_decay != cfg.optimizer.weight_decay
        else lab.model
    )
    sigma_sq = lab.noise.sigma_sq
    spectrum = lab.spectrum
    tr_h = float(spectrum.sum())
    pred = diffusion.expected_local_displacement(opt, sigma_sq * tr_h)

    ou = ou_theory.build_ou(model, lab.noise, opt, lab.basis)
    R, T = cfg.run.replicas, cfg.run.steps
    z0 = ou_theory.sample_stationary(ou, R, seed=seed)
    stats = run_ensemble(
        model, opt, T, z0[:, : model.d], z0[:, model.d :], seed + 1, lab.noise
    )
    tail = slice((2 * (T + 1)) // 3, None)
    measured = float(np.mean(stats["mean_delta_sq"][tail]))

    horizon = cfg.analysis.horizon or T
    window = cfg.analysis.fit_window_start
    report = diffusion.diffusion_report(spectrum, opt, sigma_sq, horizon, window)
    sim_curve = np.column_stack([np.arange(1, T + 1), stats["mean_Delta_sq"][1:]])
    c_sim, _ = diffusion.fit_power_law(sim_curve, window)
    return {
        "param_name": param,
        "param_value": value,
        "delta_sq_pred": pred,
        "delta_sq_measured": measured,
        "c_fit_analytic": report.fitted_exponent,
        "c_fit_simulated": c_sim,
    }


def cmd_sweep(cfg: ExperimentConfig, out: Path, workers: int, param: str, grid: list[float]) -> int:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    lab = Lab(cfg)
    seeds = _derive_seeds(cfg.run.seed, len(grid))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda iv: _sweep_point(lab, param, iv[1], seeds[iv[0]]), enumerate(grid)))

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["param_name", "param_value", "delta_sq_pred", "delta_sq_measured",
             "c_fit_analytic", "c_fit_simulated"]
        )
        for row in rows:
            writer.writerow(
                [row["param_name"], repr(float(row["param_value"])), repr(row["delta_sq_pred"]),
                 repr(row["delta_sq_measured"]), repr(row["c_fit_analytic"]),
                 repr(row["c_fit_simulated"])]
            )
    _write_manifest(lab, out, "sweep", {"param": param, "grid": [float(g) for g in grid],
                                        "seeds": seeds})
    return 0


def cmd_decompose(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    lab = Lab(cfg)
    opt = cfg.optimizer
    if lab.noise.sigma_sq <= 0:
        raise ValueError("decompose needs sigma_gen > 0 (the splitting is undefined at zero noise)")
    dec = dec_mod.closed_form_qu(lab.model, lab.noise, opt, basis=lab.basis)
    cert = dec_mod.stationarity_certificate(dec, lab.model, opt, n_probe=100, seed=cfg.run.seed)
    payload = dec_mod.certificate_json(dec, cert)
    if lab.model.d <= 16:
        general = dec_mod.kwon_decompose(dec.A, dec.D)
        payload["closed_vs_general"] = float(
            np.linalg.norm(general.U - dec.U) / np.linalg.norm(dec.U)
        )
    (out / "certificate.json").write_text(json.dumps(payload, indent=2))

    i, j = cfg.analysis.plane
    if not (1 <= i <= lab.model.d and 1 <= j <= lab.model.d and i != j):
        raise ConfigError("plane indices must be distinct modes in [1, d]", "analysis", "plane")
    i, j = i - 1, j - 1
    rho = lab.spectrum
    wd = opt.weight_decay
    c = 2.0 / (opt.eta * (1.0 + opt.beta))
    s2 = lab.noise.sigma_sq
    u_pos = c * (rho + wd) / (s2 * rho)
    u_vel = 1.0 / (s2 * rho)
    ss_pos = opt.eta * s2 * rho / (2 * opt.batch_size * (1 - opt.beta) * (rho + wd))
    ss_vel = s2 * rho / (opt.batch_size * (1 - opt.beta**2))

    n = cfg.analysis.grid_points
    r = cfg.analysis.grid_radius
    xs = np.linspace(-r, r, n) * math.sqrt(ss_pos[i])
    ys = np.linspace(-r, r, n) * math.sqrt(ss_pos[j])
    with open(out / "position_plane.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "phi", "psi_theta"])
        for x in xs:
            for y in ys:
                phi = 0.5 * ((rho[i] + wd) * x**2 + (rho[j] + wd) * y**2)
                psi = 0.5 * (u_pos[i] * x**2 + u_pos[j] * y**2)
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(phi)), repr(float(psi))])

    for l in (i, j):
        aa = np.linspace(-r, r, n) * math.sqrt(ss_pos[l])
        bb = np.linspace(-r, r, n) * math.sqrt(ss_vel[l])
        with open(out / f"phase_plane_mode_{l + 1}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b", "psi", "j_a", "j_b"])
            for a in aa:
                for b in bb:
                    psi = 0.5 * (u_pos[l] * a**2 + u_vel[l] * b**2)
                    writer.writerow(
                        [repr(float(a)), repr(float(b)), repr(float(psi)),
                         repr(float(b)), repr(float(-c * (rho[l] + wd) * a))]
                    )
    _write_manifest(
        lab, out, "decompose",
        {"plane": [i + 1, j + 1], "circulation": "clockwise", "circulation_sign": -1},
    )
    return 0


def cmd_fit(args) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise ConfigError(f"csv file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError("csv file has no header")
        t_col = args.t_column or next(
            (c for c in ("t", "step") if c in reader.fieldnames), None
        )
        v_col = args.value_column or next(
            (c for c in ("Delta_sq", "value", "msd") if c in reader.fieldnames), None
        )
        if t_col is None or v_col is None:
            raise ValueError(
                f"cannot find time/value columns in {reader.fieldnames}; "
                "use --t-column/--value-column"
            )
        pairs = [(float(row[t_col]), float(row[v_col])) for row in reader]
    c, amp = diffusion.fit_power_law(np.asarray(pairs), args.window_start)
    result = {"exponent": c, "amplitude": amp, "window_start": args.window_start,
              "points": len(pairs), "t_column": t_col, "value_column": v_col}
    print(json.dumps(result, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "fit.json").write_text(json.dumps(result, indent=2))
    return 0


def _parse_grid(args) -> list[float]:
    if args.grid:
        return [float(x) for x in args.grid.split(",") if x.strip()]
    if args.grid_range:
        try:
            lo, hi, num = args.grid_range.split(":")
            return np.linspace(float(lo), float(hi), int(num)).tolist()
        except ValueError:
            raise ConfigError(f"bad --grid-range {args.grid_range!r}; expected A:B:N") from None
    raise ConfigError("sweep needs --grid or --grid-range")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgdlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="override run seed")

    for name in ("simulate", "compare", "decompose", "theory"):
        common(sub.add_parser(name))
    sweep = sub.add_parser("sweep")
    common(sweep)
    sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sweep.add_argument("--grid", default=None, help="comma-separated values")
    sweep.add_argument("--grid-range", default=None, help="A:B:N evenly spaced values")

    fit = sub.add_parser("fit")
    fit.add_argument("--csv", required=True)
    fit.add_argument("--t-column", default=None)
    fit.add_argument("--value-column", default=None)
    fit.add_argument("--window-start", type=float, default=1.0 / 3.0)
    fit.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            return cmd_fit(args)
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=args.seed))
        out = Path(args.out if args.out else cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        workers = _workers(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, workers)
        if args.command == "compare":
            return cmd_compare(cfg, out, workers)
        if args.command == "theory":
            return cmd_theory(cfg, out, workers)
        if args.command == "decompose":
            return cmd_decompose(cfg, out, workers)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, workers, args.param, _parse_grid(args))
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
