"""Command-line runner: validated configs in, plot-ready CSV/JSON out.

Subcommands: ``run`` executes one experiment from a JSON config,
``reproduce`` executes a named desk-scale preset and prints a comparison
table, ``validate`` checks a config without computing.  Every run writes
a manifest holding the fully resolved config, seed, package version, and
wall time, so artifacts can be regenerated from the manifest alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from . import __version__, clusterdyn, fitkit, presets, protocol, transport
from .network import Placement, ppm_to_density

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = (
    fitkit.FitError,
    transport.StiffnessError,
    transport.WindowError,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    pass


def _load_schema() -> dict:
    ref = resources.files("spinnet").joinpath("schemas/runconfig.schema.json")
    with ref.open() as fh:
        return json.load(fh)


def validate_config(config: dict) -> list:
    """Schema plus physics sanity; returns warnings, raises ConfigError."""
    try:
        jsonschema.validate(config, _load_schema())
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {err.message}") from err
    params = config.get("params", {})
    omega = params.get("omega_mhz")
    if omega is not None and omega <= 0:
        raise ConfigError("config field params/omega_mhz: must be positive")
    warnings = []
    network = config.get("network", {})
    densities = network.get("densities_ppm", {})
    total = sum(densities.values())
    exclusion = network.get("exclusion_nm", 1.0)
    if total > 0 and exclusion > 0:
        spacing = ppm_to_density(total) ** (-1.0 / 3.0)
        if spacing < exclusion:
            warnings.append(
                f"mean spacing {spacing:.2f} nm at {total:g} ppm is below the "
                f"exclusion radius {exclusion:g} nm; generation may fail"
            )
    return warnings


def _params(config: dict) -> dict:
    return config.get("params", {})


def _density_p1(config: dict, default: float) -> float:
    return config.get("network", {}).get("densities_ppm", {}).get("P1", default)


def _placement(config: dict) -> Placement:
    name = config.get("network", {}).get("placement", "diamond_lattice")
    return Placement(name)


def _run_deer(config: dict) -> tuple:
    p = _params(config)
    density = _density_p1(config, 6.3)
    trace = clusterdyn.deer_trace(
        density,
        n_realizations=config.get("realizations", 200),
        n_bath=p.get("n_bath", 5),
        seed=config.get("seed", 0),
        bath_pi=p.get("bath_pi", True),
        placement=_placement(config),
    )
    fit = clusterdyn.extract_dephasing_rate(trace)
    summary = {
        "density_ppm": density,
        "rate_mhz": fit.rate_mhz,
        "rate_sigma": fit.rate_sigma,
        "t2_us": fit.t2_us,
        "beta": fit.beta,
    }
    return (
        {"deer_trace.csv": trace.to_csv(), "deer_fit.json": json.dumps(summary, indent=2)},
        summary,
    )


def _run_hahn(config: dict) -> tuple:
    p = _params(config)
    density = _density_p1(config, 6.3)
    trace = clusterdyn.deer_trace(
        density,
        n_realizations=config.get("realizations", 200),
        n_bath=p.get("n_bath", 5),
        seed=config.get("seed", 0),
        bath_pi=False,
        placement=_placement(config),
    )
    summary = {
        "density_ppm": density,
        "max_refocus_deviation": float(np.max(np.abs(trace.signal - 1.0))),
    }
    return (
        {"hahn_trace.csv": trace.to_csv(), "hahn_summary.json": json.dumps(summary, indent=2)},
        summary,
    )


def _run_rabi(config: dict) -> tuple:
    p = _params(config)
    omega = p.get("omega_mhz", 5.0)
    detuning = p.get("detuning_mhz", 0.0)
    t_max = p.get("t_max_us", 2.0)
    n_points = p.get("n_points", 256)
    grid = np.linspace(0.0, t_max, n_points)
    trace = clusterdyn.run_rabi(omega, grid, detuning_mhz=detuning)
    peak = clusterdyn.fft_peak(trace)
    summary = {
        "omega_mhz": omega,
        "detuning_mhz": detuning,
        "peak_mhz": peak,
        "expected_mhz": float(np.hypot(omega, detuning)),
    }
    return (
        {"rabi_trace.csv": trace.to_csv(), "rabi_summary.json": json.dumps(summary, indent=2)},
        summary,
    )


def _run_diffusion(config: dict) -> tuple:
    p = _params(config)
    res = transport.diffusion_scaling(
        p.get("omega_mhz", 6.40),
        density_ppm=_density_p1(config, 1.575),
        n_list=tuple(p.get("n_list", (100, 200, 400, 800))),
        n_realizations=config.get("realizations", 100),
        w_mhz=config.get("network", {}).get("disorder_mhz", 1.36),
        gamma_mhz=p.get("gamma_mhz", 0.15),
        seed=config.get("seed", 0),
    )
    lines = ["L_nm,D_L_nm2_per_us,sigma"]
    for L, d, s in zip(res.box_sizes_nm, res.d_values, res.d_sigmas):
        lines.append(f"{float(L)!r},{float(d)!r},{float(s)!r}")
    d_inf = res.extrapolation.d_inf_nm2_per_us
    summary = {
        "omega_MHz": res.omega_mhz,
        "D_inf_nm2_per_us": d_inf,
        "D_inf_sigma": res.extrapolation.sigma,
        "diffusion_length_30us_nm": transport.diffusion_length(max(d_inf, 0.0), 30.0),
    }
    return (
        {
            "diffusion_scaling.csv": "\n".join(lines) + "\n",
            "diffusion_summary.json": res.to_json(),
        },
        summary,
    )


def _protocol_config(p: dict, omega: float) -> protocol.CycleConfig:
    return protocol.CycleConfig(
        omega_mhz=omega,
        t_hh_us=p.get("t_hh_us", 5.0),
        t_laser_us=p.get("t_laser_us", 5.0),
        n_cycles=p.get("n_cycles", 32),
        p_nv0=p.get("p_nv0", 0.75),
        t1rho_dark_us=p.get("t1rho_dark_us", 430.0),
        t1rho_laser_us=p.get("t1rho_laser_us", 32.0),
        t1rho_nv_us=p.get("t1rho_nv_us", 1300.0),
        probe_k=p.get("probe_k", 8),
    )


def _run_protocol(config: dict) -> tuple:
    p = _params(config)
    omega = p.get("omega_mhz", 6.40)
    seed = config.get("seed", 0)
    n_p1 = p.get("n_p1", 120)
    w = config.get("network", {}).get("disorder_mhz", 1.36)
    factory = lambda r: protocol.protocol_network(n_p1=n_p1, w_mhz=w, seed=seed, realization=r)
    res = protocol.run_iterative_protocol(
        factory, _protocol_config(p, omega), n_realizations=config.get("realizations", 100)
    )
    sat = res.saturation
    summary = {
        "omega_MHz": omega,
        "P_sat": sat.a_sat,
        "P_sat_sigma": sat.a_sat_sigma,
        "N_sat": sat.n_sat,
        "N_sat_sigma": sat.n_sat_sigma,
        "n_realizations": res.n_realizations,
    }
    return (
        {
            "protocol_trajectory.csv": res.to_csv(),
            "protocol_summary.json": json.dumps(summary, indent=2),
        },
        summary,
    )


def _run_crossover(config: dict) -> tuple:
    p = _params(config)
    omegas = p.get("omegas_mhz", [0.5, 1.0, 2.0, 3.2, 6.4, 10.0])
    p_sat, p_sig, cross = protocol.saturation_sweep(
        omegas,
        n_realizations=config.get("realizations", 100),
        n_p1=p.get("n_p1", 120),
        seed=config.get("seed", 0),
    )
    lines = ["omega_MHz,P_sat,P_sat_sigma"]
    for o, v, s in zip(omegas, p_sat, p_sig):
        lines.append(f"{float(o)!r},{float(v)!r},{float(s)!r}")
    summary = {
        "omegas_MHz": list(map(float, omegas)),
        "A_inf": cross.a_inf,
        "A_inf_sigma": cross.a_inf_sigma,
        "W_MHz": cross.w_mhz,
        "W_sigma": cross.w_sigma,
    }
    return (
        {
            "crossover_table.csv": "\n".join(lines) + "\n",
            "crossover_summary.json": json.dumps(summary, indent=2),
        },
        summary,
    )


def _run_concentration(config: dict) -> tuple:
    p = _params(config)
    if "gamma_exp_mhz" not in p:
        raise ConfigError("config field params/gamma_exp_mhz: required for concentration")
    densities = p.get("calibration_densities_ppm", [1.6, 3.2, 6.3, 12.6])
    if len(densities) < 2:
        raise ConfigError("config field params/calibration_densities_ppm: need at least two")
    seed = config.get("seed", 0)
    n_real = config.get("realizations", 200)
    rates, sigmas = [], []
    for dens in densities:
        trace = clusterdyn.deer_trace(dens, n_realizations=n_real, seed=seed)
        fit = clusterdyn.extract_dephasing_rate(trace)
        rates.append(fit.rate_mhz)
        sigmas.append(fit.rate_sigma)
    alpha = clusterdyn.calibrate_alpha(densities, rates, rate_sigmas=sigmas)
    k = clusterdyn.compute_K(
        alpha.alpha_mhz_per_ppm, p.get("addressed_fraction", 0.25), alpha.alpha_sigma
    )
    est = clusterdyn.estimate_concentration(
        p["gamma_exp_mhz"],
        p.get("gamma_sigma_mhz", 0.0),
        k.k_mhz_per_group_ppm,
        k.k_sigma,
        n_mc=p.get("n_mc", 10_000),
        seed=seed,
    )
    summary = {
        "alpha_mhz_per_ppm": alpha.alpha_mhz_per_ppm,
        "alpha_sigma": alpha.alpha_sigma,
        "K_mhz_per_group_ppm": k.k_mhz_per_group_ppm,
        "K_sigma": k.k_sigma,
        "density_ppm": est.mean_ppm,
        "density_sigma_ppm": est.sigma_ppm,
        "rejection_warning": est.rejection_warning,
    }
    return ({"concentration_summary.json": json.dumps(summary, indent=2)}, summary)


_FIT_MODELS = {
    "stretched_exp": fitkit.STRETCHED_EXP,
    "exp_saturation": fitkit.EXP_SATURATION,
    "lorentzian": fitkit.LORENTZIAN,
    "damped_cosine": fitkit.DAMPED_COSINE,
    "rabi_crossover": protocol.CROSSOVER,
}


def _run_fit(config: dict) -> tuple:
    p = _params(config)
    model_name = p.get("model")
    if model_name not in _FIT_MODELS:
        raise ConfigError(
            f"config field params/model: must be one of {sorted(_FIT_MODELS)}"
        )
    path = p.get("data_csv")
    if not path or not os.path.exists(path):
        raise ConfigError("config field params/data_csv: file not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ConfigError("config field params/data_csv: need at least x,y columns")
    sigma = data[:, 2] if data.shape[1] > 2 else None
    res = fitkit.fit(_FIT_MODELS[model_name], data[:, 0], data[:, 1], sigma=sigma, p0=p.get("p0"))
    summary = {
        "model": model_name,
        "params": {k: res[k] for k in res.param_names},
        "sigmas": {k: res.sigma(k) for k in res.param_names},
        "residual_norm": res.residual_norm,
        "converged": res.converged,
    }
    return ({"fit_report.json": json.dumps(summary, indent=2)}, summary)


_EXPERIMENTS = {
    "deer": _run_deer,
    "rabi": _run_rabi,
    "hahn": _run_hahn,
    "diffusion": _run_diffusion,
    "protocol": _run_protocol,
    "crossover": _run_crossover,
    "concentration": _run_concentration,
    "fit": _run_fit,
}


def _out_root() -> str:
    return os.environ.get("SPINNET_OUT", "spinnet_runs")


def _write_artifacts(out_dir: str, artifacts: dict, manifest: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, text in artifacts.items():
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _apply_overrides(config: dict, args) -> dict:
    config = json.loads(json.dumps(config))
    if args.seed is not None:
        config["seed"] = args.seed
    if args.realizations is not None:
        config["realizations"] = args.realizations
    if args.omega_mhz is not None:
        config.setdefault("params", {})["omega_mhz"] = args.omega_mhz
    if args.out is not None:
        config["out_dir"] = args.out
    return config


def _cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = _apply_overrides(config, args)
        warnings = validate_config(config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    experiment = config["experiment"]
    out_dir = config.get("out_dir") or os.path.join(_out_root(), experiment)
    start = time.time()
    try:
        artifacts, summary = _EXPERIMENTS[experiment](config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest = {
        "experiment": experiment,
        "config": config,
        "seed": config.get("seed", 0),
        "version": __version__,
        "wall_time_s": time.time() - start,
        "created_unix": time.time(),
    }
    _write_artifacts(out_dir, artifacts, manifest)
    if not args.quiet:
        print(f"{experiment}: wrote {len(artifacts)} artifacts to {out_dir}")
        for key, value in summary.items():
            print(f"  {key} = {value}")
    return EXIT_OK


def _cmd_reproduce(args) -> int:
    try:
        result = presets.run_preset(args.tag, realizations=args.realizations, seed=args.seed or 0)
    except KeyError:
        tags = ", ".join(sorted(presets.PRESETS))
        print(f"error: unknown tag {args.tag!r}; valid tags: {tags}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    out_dir = args.out or os.path.join(_out_root(), args.tag)
    manifest = {
        "preset": args.tag,
        "realizations": args.realizations,
        "seed": args.seed or 0,
        "version": __version__,
        "created_unix": time.time(),
    }
    _write_artifacts(out_dir, result.artifacts, manifest)
    if not args.quiet:
        print(f"{args.tag}: wrote {len(result.artifacts)} artifacts to {out_dir}")
        width = max(len(r.quantity) for r in result.rows)
        for row in result.rows:
            if row.within is None:
                status = "  --  "
            else:
                status = "within" if row.within else "OUTSIDE"
            print(f"  {row.quantity:<{width}}  {row.simulated:>12}  target {row.target:<22} {status}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
        warnings = validate_config(config)
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    for w in warnings:
        print(f"warning: {w}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinnet",
        description="Run, reproduce, and validate spin-network simulations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one experiment from a JSON config")
    run_p.add_argument("config", help="path to a RunConfig JSON file")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--realizations", type=int, default=None)
    run_p.add_argument("--omega-mhz", type=float, default=None, dest="omega_mhz")
    run_p.add_argument("--out", default=None, help="output directory (default $SPINNET_OUT/<experiment>)")
    run_p.add_argument("--quiet", action="store_true")
    run_p.set_defaults(func=_cmd_run)

    rep_p = sub.add_parser("reproduce", help="run a named desk-scale preset")
    rep_p.add_argument("tag", help="preset tag, e.g. fig-s4a")
    rep_p.add_argument("--seed", type=int, default=None)
    rep_p.add_argument("--realizations", type=int, default=None)
    rep_p.add_argument("--out", default=None)
    rep_p.add_argument("--quiet", action="store_true")
    rep_p.set_defaults(func=_cmd_reproduce)

    val_p = sub.add_parser("validate", help="check a config without running it")
    val_p.add_argument("config", help="path to a RunConfig JSON file")
    val_p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
