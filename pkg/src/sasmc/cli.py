"""Command-line harness.

Verbs: ``geometry``, ``simulate``, ``run``, ``exp1``, ``exp2``, ``exp3``.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .estimation import Discrepancy, delta_c, delta_d, summarize, summary_to_json
from .experiments import (
    DEFAULT_D_MAX,
    DEFAULT_GROUPS,
    DEFAULT_POISSON_LAMBDA,
    DEFAULT_SIGMA_Q,
    build_model,
    experiment1,
    experiment2,
    experiment3,
)
from .forward import (
    LeadFieldProvider,
    build_default_geometry,
    geometry_from_json,
    geometry_to_json,
)
from .kernels import KernelSettings
from .model import DipoleConfig
from .serialize import config_hash
from .simulate import ScenarioSpec, dataset_from_json, dataset_to_json, generate
from .smc import SmcSettings, run


class ConfigError(Exception):
    pass


def _load_geometry(path: str | None, seed: int):
    if path is not None:
        geo_path = Path(path)
        if not geo_path.exists():
            raise ConfigError(f"geometry file not found: {geo_path}")
        return geometry_from_json(geo_path.read_text())
    return build_default_geometry(seed)


def cmd_geometry(args) -> int:
    grid, sensors = build_default_geometry(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(geometry_to_json(grid, sensors) + "\n")
    print(out)
    return 0


def cmd_simulate(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"scenario file not found: {spec_path}")
    try:
        doc = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file is not valid JSON: {exc}") from exc
    for required in ("n_dipoles", "correlated", "seed"):
        if required not in doc:
            raise ConfigError(f"scenario missing required field '{required}'")
    try:
        spec = ScenarioSpec(
            n_dipoles=int(doc["n_dipoles"]),
            correlated=bool(doc["correlated"]),
            n_time=int(doc.get("n_time", 30)),
            noise_std=doc.get("noise_std"),
            min_separation=float(doc.get("min_separation", 0.01)),
            seed=int(doc["seed"]),
            peak_strengths=doc.get("peak_strengths"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    geometry_seed = int(doc.get("geometry_seed", args.geometry_seed))
    grid, sensors = _load_geometry(args.geometry, geometry_seed)
    truth = generate(spec, grid, sensors)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = out_dir / f"dataset_seed{spec.seed}.json"
    dataset_path.write_text(dataset_to_json(truth) + "\n")
    print(dataset_path)
    return 0


def _resolve_run_config(args) -> dict:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        doc = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if "dataset" not in doc:
        raise ConfigError("run config missing required field 'dataset'")
    resolved = {
        "dataset": doc["dataset"],
        "geometry": doc.get("geometry"),
        "geometry_seed": int(doc.get("geometry_seed", 0)),
        "sigma_q": float(doc.get("sigma_q", DEFAULT_SIGMA_Q)),
        "sigma_e": doc.get("sigma_e", "auto"),
        "poisson_lambda": float(doc.get("poisson_lambda", DEFAULT_POISSON_LAMBDA)),
        "d_max": int(doc.get("d_max", DEFAULT_D_MAX)),
        "particles": int(doc.get("particles", 1000)),
        "ess_ratio_band": list(doc.get("ess_ratio_band", [0.90, 0.99])),
        "resample_threshold_fraction": float(doc.get("resample_threshold_fraction", 0.5)),
        "kernel": dict(doc.get("kernel", {})),
        "master_seed": int(doc.get("master_seed", 0)),
        "workers": int(doc.get("workers", 1)),
        "out_dir": doc.get("out_dir"),
    }
    if args.seed is not None:
        resolved["master_seed"] = args.seed
    if args.workers is not None:
        resolved["workers"] = args.workers
    if args.particles is not None:
        resolved["particles"] = args.particles
    if args.out is not None:
        resolved["out_dir"] = args.out
    if resolved["out_dir"] is None:
        raise ConfigError("run config missing 'out_dir' (or pass --out)")
    return resolved


def cmd_run(args) -> int:
    cfg = _resolve_run_config(args)
    dataset_path = Path(cfg["dataset"])
    if not dataset_path.exists():
        raise ConfigError(f"dataset file not found: {dataset_path}")
    truth = dataset_from_json(dataset_path.read_text())
    grid, sensors = _load_geometry(cfg["geometry"], cfg["geometry_seed"])
    provider = LeadFieldProvider.from_geometry(grid, sensors)
    if provider.n_sensors != truth.noisy_data.n_sensors:
        raise ConfigError(
            f"dataset has {truth.noisy_data.n_sensors} sensors but geometry has {provider.n_sensors}"
        )
    sigma_e = truth.noise_std if cfg["sigma_e"] == "auto" else float(cfg["sigma_e"])
    if sigma_e <= 0:
        raise ConfigError("sigma_e must be positive")
    model = build_model(
        provider,
        truth.noisy_data.n_times,
        sigma_e=sigma_e,
        sigma_q=cfg["sigma_q"],
        poisson_lambda=cfg["poisson_lambda"],
        d_max=cfg["d_max"],
    )
    settings = SmcSettings(
        particle_count=cfg["particles"],
        ess_ratio_band=tuple(cfg["ess_ratio_band"]),
        resample_threshold_fraction=cfg["resample_threshold_fraction"],
        master_seed=cfg["master_seed"],
    )
    kernel_settings = KernelSettings(**cfg["kernel"])
    digest = config_hash(cfg)
    system, trace = run(model, truth.noisy_data, grid, kernel_settings, settings, workers=cfg["workers"])
    summary = summarize(system, model, grid, truth.noisy_data)

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.json"
    summary_path.write_text(summary_to_json(summary, grid, config_hash=digest) + "\n")
    trace.to_csv(out_dir / "trace.csv", config_hash=digest)
    paths = [summary_path, out_dir / "trace.csv"]
    if truth.config.d > 0:
        disc = Discrepancy(
            delta_d=delta_d(truth.config, DipoleConfig(tuple(summary.locations_hat))),
            delta_c=(
                delta_c(truth.config, DipoleConfig(tuple(summary.locations_hat)), grid)
                if summary.locations_hat
                else float("nan")
            ),
        )
        disc_path = out_dir / "discrepancy.json"
        disc_path.write_text(
            json.dumps(
                {
                    "config_hash": digest,
                    "delta_d": disc.delta_d,
                    "delta_c_m": None if np.isnan(disc.delta_c) else disc.delta_c,
                }
            )
            + "\n"
        )
        paths.append(disc_path)
    for p in paths:
        print(p)
    return 0


def cmd_exp1(args) -> int:
    groups = args.groups.split(",") if args.groups else list(DEFAULT_GROUPS)
    cfg = {
        "command": "exp1",
        "n_per_group": args.n_per_group,
        "particles": args.particles,
        "seed": args.seed,
        "groups": groups,
        "geometry_seed": args.geometry_seed,
    }
    experiment1(
        args.out,
        n_per_group=args.n_per_group,
        particles=args.particles,
        master_seed=args.seed,
        workers=args.workers,
        groups=groups,
        geometry_seed=args.geometry_seed,
        config_hash=config_hash(cfg),
    )
    print(Path(args.out) / "exp1_discrepancies.csv")
    return 0


def cmd_exp2(args) -> int:
    cfg = {
        "command": "exp2",
        "runs": args.runs,
        "particles": args.particles,
        "seed": args.seed,
        "threshold": args.threshold,
        "geometry_seed": args.geometry_seed,
    }
    report = experiment2(
        args.out,
        runs=args.runs,
        particles=args.particles,
        master_seed=args.seed,
        workers=args.workers,
        geometry_seed=args.geometry_seed,
        threshold=args.threshold,
        config_hash=config_hash(cfg),
    )
    print(Path(args.out) / "exp2_intensity_std.csv")
    print(f"semi_not_worse_fraction={report.fraction_semi_not_worse!r}")
    return 0


def cmd_exp3(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    cfg = {
        "command": "exp3",
        "lengths": lengths,
        "particles": args.particles,
        "seed": args.seed,
        "geometry_seed": args.geometry_seed,
    }
    experiment3(
        args.out,
        lengths=lengths,
        particles=args.particles,
        master_seed=args.seed,
        workers=args.workers,
        geometry_seed=args.geometry_seed,
        config_hash=config_hash(cfg),
    )
    print(Path(args.out) / "exp3_timings.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sasmc",
        description="Adaptive SMC samplers for multi-dipole source localization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geometry", help="write the default geometry as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("simulate", help="generate a synthetic dataset from a scenario file")
    p.add_argument("--spec", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--geometry", default=None, help="geometry JSON file (default: built from seed)")
    p.add_argument("--geometry-seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="analyze a dataset with the marginalized sampler")
    p.add_argument("--config", required=True, help="run configuration JSON file")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--out", default=None, help="override output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("exp1", help="validation fleet: discrepancy statistics per group")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-group", type=int, default=20)
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--groups", default=None, help="comma list from {2u,3u,4u,2c,3c,4c}")
    p.add_argument("--geometry-seed", type=int, default=0)
    p.set_defaults(func=cmd_exp1)

    p = sub.add_parser("exp2", help="variance comparison against the full sampler")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threshold", type=float, default=5e-3)
    p.add_argument("--geometry-seed", type=int, default=0)
    p.set_defaults(func=cmd_exp2)

    p = sub.add_parser("exp3", help="run time versus window length")
    p.add_argument("--out", required=True)
    p.add_argument("--lengths", default="1,5,10,20,30")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--geometry-seed", type=int, default=0)
    p.set_defaults(func=cmd_exp3)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
