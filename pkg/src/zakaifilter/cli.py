"""Command-line front end.

Subcommands ``simulate``, ``filter``, ``diagnose`` and ``compare`` each run one
seed of one scenario and write their artifacts into ``--out``. Every output is
a pure function of the config, the seed and the input files, so reruns are
byte-identical.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime or
numerical error (including missing inputs).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import jsonschema
import numpy as np

from . import diagnostics as diag
from .config import ScenarioConfig
from .errors import ConfigError, GridMismatch, MassCollapseError, ZakaiError
from .oracles import density_distance, kalman_bucy, particle_filter
from .scenarios import builtin
from .sde_sim import read_path_binary, simulate_system, write_path_binary, write_path_csv
from .zakai import (
    DensityField,
    read_density_binary,
    read_trajectory,
    solve_zakai,
    weighted_mean,
    write_density_binary,
    write_density_csv,
    write_stream_binary,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMPARE_SCHEMA_VERSION = "zakaifilter.compare/1"
FAILURE_SCHEMA_VERSION = "zakaifilter.failure/1"
PARTICLE_SEED_OFFSET = 1_000_003

_NUMS = {"type": "array", "items": {"type": "number"}}

COMPARE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Comparison",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "seed", "t_final", "kalman", "particles", "reference"],
    "properties": {
        "schema_version": {"const": COMPARE_SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "t_final": {"type": "number"},
        "kalman": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["times", "mean_delta", "var_rel_error", "max_scaled_mean_delta",
                         "max_var_rel_error"],
            "properties": {
                "times": _NUMS, "mean_delta": _NUMS, "var_rel_error": _NUMS,
                "max_scaled_mean_delta": {"type": "number", "minimum": 0},
                "max_var_rel_error": {"type": "number", "minimum": 0},
            },
        },
        "particles": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["N", "times", "mean_delta", "l1_final", "ess_final"],
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "times": _NUMS,
                "mean_delta": _NUMS,
                "l1_final": {"type": "number", "minimum": 0},
                "ess_final": {"type": "number", "minimum": 1},
            },
        },
        "reference": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["file", "l1_final"],
            "properties": {
                "file": {"type": "string"},
                "l1_final": {"type": "number", "minimum": 0},
            },
        },
    },
}

FAILURE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Failure",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "command", "seed", "error", "message"],
    "properties": {
        "schema_version": {"const": FAILURE_SCHEMA_VERSION},
        "command": {"type": "string"},
        "seed": {"type": "integer"},
        "error": {"type": "string"},
        "message": {"type": "string"},
    },
}


def _json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _files(out: Path, seed: int) -> dict[str, Path]:
    tag = f"seed{seed}"
    return {
        "path_bin": out / f"path_{tag}.bin",
        "path_csv": out / f"path_{tag}.csv",
        "density_bin": out / f"density_{tag}.bin",
        "density_csv": out / f"density_final_{tag}.csv",
        "stream_bin": out / f"stream_{tag}.bin",
        "streams_csv": out / f"streams_{tag}.csv",
        "report": out / f"report_{tag}.json",
        "compare": out / f"compare_{tag}.json",
        "moments_zakai": out / f"moments_zakai_{tag}.csv",
        "moments_kalman": out / f"moments_kalman_{tag}.csv",
        "moments_particles": out / f"moments_particles_{tag}.csv",
        "failure": out / f"failure_{tag}.json",
    }


def load_config(ref: str) -> ScenarioConfig:
    """Load a YAML scenario, or a built-in one given as ``builtin:NAME``."""
    if ref.startswith("builtin:"):
        return builtin(ref.split(":", 1)[1])
    return ScenarioConfig.load(ref)


# --------------------------------------------------------------------------- pipelines


def _path(cfg: ScenarioConfig, seed: int, files: dict, generate: bool = True):
    if files["path_bin"].exists():
        return read_path_binary(files["path_bin"])
    if not generate:
        raise FileNotFoundError(f"missing input {files['path_bin']}")
    return _simulate(cfg, seed, files)


def _simulate(cfg: ScenarioConfig, seed: int, files: dict):
    path = simulate_system(cfg.build_system(), cfg.time["path_dt"], seed)
    write_path_binary(path, files["path_bin"])
    write_path_csv(path, files["path_csv"])
    return path


def _filter(cfg: ScenarioConfig, seed: int, files: dict, snapshot_every):
    spec = cfg.build_system()
    path = _path(cfg, seed, files)
    run = cfg.run
    traj = solve_zakai(
        spec, path, cfg.grid_spec(spec.d), stride=cfg.stride, scheme=run["scheme"],
        transport=run["transport"], noise=run["noise"], snapshot_every=snapshot_every,
    )
    write_density_binary(traj, files["density_bin"])
    write_stream_binary(traj, files["stream_bin"])
    write_density_csv(traj.fields[-1], traj.grid, files["density_csv"])
    diag.write_streams_csv(traj, diag.innovation_path(traj, path, spec), files["streams_csv"])
    return traj, path


def _load_trajectory(cfg: ScenarioConfig, files: dict):
    for key in ("stream_bin", "density_bin"):
        if not files[key].exists():
            raise FileNotFoundError(f"missing input {files[key]}")
    traj = read_trajectory(files["stream_bin"], files["density_bin"])
    expected = cfg.grid_spec()
    if traj.grid != expected:
        raise GridMismatch(f"trajectory grid {traj.grid.to_dict()} differs from config grid "
                           f"{expected.to_dict()}")
    return traj


def _diagnose(cfg: ScenarioConfig, seed: int, files: dict):
    spec = cfg.build_system()
    traj = _load_trajectory(cfg, files)
    path = _path(cfg, seed, files, generate=False)
    report = diag.diagnose(traj, path, spec)
    payload = json.loads(report.to_json())
    diag.validate_report(payload)
    files["report"].write_text(report.to_json())
    diag.write_streams_csv(traj, diag.innovation_path(traj, path, spec), files["streams_csv"])
    return report


def _moments(traj) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the normalized density at every snapshot."""
    x = traj.grid.mesh
    means, covs = [], []
    for i in range(len(traj.snapshot_index)):
        st = traj.state(i)
        mean = np.array([weighted_mean(st, xi) for xi in x])
        second = np.array([[weighted_mean(st, xi * xj) for xj in x] for xi in x])
        means.append(mean)
        covs.append(second - np.outer(mean, mean))
    return np.array(means), np.array(covs)


def write_moments_csv(dest: Path, times, means, covs) -> None:
    """Columns ``t, mean_i, cov_ij``; shared by the filter and the oracles."""
    d = means.shape[1]
    cols = ["t"] + [f"mean_{i + 1}" for i in range(d)]
    cols += [f"cov_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    data = np.column_stack([times, means, np.asarray(covs).reshape(len(times), -1)])
    with open(dest, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _compare(cfg: ScenarioConfig, seed: int, files: dict, reference: str | None):
    spec = cfg.build_system()
    if files["stream_bin"].exists() and files["density_bin"].exists():
        traj = _load_trajectory(cfg, files)
        path = _path(cfg, seed, files)
    else:
        traj, path = _filter(cfg, seed, files, cfg.run["snapshot_every"])
    final = traj.state(-1)
    k = traj.snapshot_index
    times = traj.times[k]
    z_mean, z_cov = _moments(traj)
    write_moments_csv(files["moments_zakai"], times, z_mean, z_cov)
    payload = {
        "schema_version": COMPARE_SCHEMA_VERSION,
        "seed": seed,
        "t_final": float(final.t),
        "kalman": None,
        "particles": None,
        "reference": None,
    }
    if cfg.oracle["kalman"]:
        means, covs = kalman_bucy(cfg.linear_spec(), path, traj.dt)
        means, covs = means[k], covs[k]
        sd = np.sqrt(np.diagonal(covs, axis1=1, axis2=2))
        dm = np.max(np.abs(z_mean - means) / sd, axis=1)
        rel = np.max(np.abs(np.diagonal(z_cov, axis1=1, axis2=2) / sd**2 - 1.0), axis=1)
        payload["kalman"] = {
            "times": times.tolist(),
            "mean_delta": dm.tolist(),
            "var_rel_error": rel.tolist(),
            "max_scaled_mean_delta": float(dm.max()),
            "max_var_rel_error": float(rel.max()),
        }
        write_moments_csv(files["moments_kalman"], times, means, covs)
    if cfg.oracle["particles"]:
        N = cfg.oracle["particles"]
        run = particle_filter(spec, path, N, seed + PARTICLE_SEED_OFFSET, stride=traj.stride)
        ens = run.final
        write_moments_csv(files["moments_particles"], times, run.means[k], run.covs[k])
        payload["particles"] = {
            "N": N,
            "times": times.tolist(),
            "mean_delta": np.max(np.abs(z_mean - run.means[k]), axis=1).tolist(),
            "l1_final": density_distance(final.normalized, ens),
            "ess_final": float(ens.ess),
        }
    if reference is not None:
        if not Path(reference).exists():
            raise FileNotFoundError(f"missing input {reference}")
        grid, _, fields = read_density_binary(reference)
        ref = DensityField(fields[-1], grid)
        if not ref.mass > 0:
            raise ConfigError(f"{reference}: final field has no mass")
        ref = DensityField(ref.values / ref.mass, grid)
        payload["reference"] = {
            "file": Path(reference).name,
            "l1_final": density_distance(final.normalized, ref),
        }
    jsonschema.validate(payload, COMPARE_SCHEMA)
    files["compare"].write_text(_json(payload))
    return payload


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zakaifilter", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "simulate a signal/observation path"),
        ("filter", "solve the Zakai equation along a path"),
        ("diagnose", "compute the diagnostics report of a filter run"),
        ("compare", "compare a filter run with the oracles"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="scenario YAML file or builtin:NAME")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (default: first entry of run.seeds)")
        p.add_argument("--out", default=None, help="output directory (default: config output)")
        p.add_argument("--snapshot-every", type=int, default=None,
                       help="store density snapshots every N filter steps")
        if name == "compare":
            p.add_argument("--reference", default=None,
                           help="density binary whose last snapshot is compared to the final field")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    seed = args.seed
    try:
        cfg = load_config(args.config)
        if seed is None:
            seed = cfg.run["seeds"][0]
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        snapshot_every = cfg.run["snapshot_every"]
        if args.snapshot_every is not None:
            if args.snapshot_every < 1:
                raise ConfigError("--snapshot-every must be a positive integer")
            snapshot_every = args.snapshot_every
        out = Path(args.out if args.out is not None else cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        files = _files(out, seed)
        if args.command == "simulate":
            _simulate(cfg, seed, files)
        elif args.command == "filter":
            _filter(cfg, seed, files, snapshot_every)
        elif args.command == "diagnose":
            _diagnose(cfg, seed, files)
        else:
            _compare(cfg, seed, files, args.reference)
    except (ConfigError, GridMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ZakaiError, FileNotFoundError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if isinstance(exc, MassCollapseError):
            _dump_failure(files, args.command, seed, exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _dump_failure(files: dict, command: str, seed: int, exc: Exception) -> None:
    payload = {
        "schema_version": FAILURE_SCHEMA_VERSION,
        "command": command,
        "seed": int(seed),
        "error": type(exc).__name__,
        "message": str(exc),
    }
    jsonschema.validate(payload, FAILURE_SCHEMA)
    files["failure"].write_text(_json(payload))


if __name__ == "__main__":
    sys.exit(main())
