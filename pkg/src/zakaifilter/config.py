"""Scenario files.

A scenario is a YAML mapping with the sections ``system``, ``grid``, ``time``,
``run``, ``oracle`` and ``output``. Unknown keys are rejected so typos fail
loudly. Two system kinds exist:

``general``
    dimensions ``d, d1, d2``; coefficients ``b, theta, B, Theta`` given as one
    family term or a list of terms; ``pi0`` with a ``kind``; optional ``y0``
    and ``mollify`` (mollification index ``n`` applied to ``theta``).
``linear_gaussian``
    matrices ``A, a0, H, theta, Theta, m0, P0`` with ``theta`` and ``Theta``
    acting on disjoint Wiener blocks; enables the Kalman-Bucy oracle.

Both kinds carry ``K``, ``delta`` and ``T``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .densities import build_density
from .errors import ConfigError
from .families import build_coefficient
from .grid import GridSpec
from .model import SystemSpec, mollify_theta
from .oracles import LinearGaussianSpec
from .sde_sim import n_steps
from .zakai import NOISE_SCHEMES, SCHEMES, TRANSPORTS

GENERAL_KEYS = {"kind", "name", "d", "d1", "d2", "b", "theta", "B", "Theta", "pi0", "y0",
                "K", "delta", "T", "mollify"}
LINEAR_KEYS = {"kind", "name", "A", "a0", "H", "theta", "Theta", "m0", "P0", "K", "delta", "T"}
GRID_KEYS = {"R", "h"}
TIME_KEYS = {"dt", "path_dt"}
RUN_KEYS = {"seeds", "snapshot_every", "scheme", "transport", "noise"}
ORACLE_KEYS = {"particles", "kalman"}
TOP_KEYS = {"system", "grid", "time", "run", "oracle", "output"}

RUN_DEFAULTS = {"seeds": [0], "snapshot_every": 1, "scheme": "implicit-euler",
                "transport": "hybrid", "noise": "euler"}
ORACLE_DEFAULTS = {"particles": 0, "kalman": False}


def _section(cfg: dict, name: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
    sec = cfg.get(name)
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(required - set(sec))
    if missing:
        raise ConfigError(f"{name}: missing key(s) {', '.join(missing)}")
    return dict(sec)


def _positive(value: Any, where: str, integer: bool = False) -> float | int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if not value > 0:
        raise ConfigError(f"{where}: must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _plain(obj: Any) -> Any:
    """Numpy-free copy suitable for YAML output."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class ScenarioConfig:
    system: dict
    grid: dict
    time: dict
    run: dict
    oracle: dict
    output: str = "out"

    # ------------------------------------------------------------------ parsing

    @classmethod
    def from_dict(cls, raw: dict) -> ScenarioConfig:
        if not isinstance(raw, dict):
            raise ConfigError("scenario: expected a mapping at the top level")
        unknown = sorted(set(raw) - TOP_KEYS)
        if unknown:
            raise ConfigError(f"scenario: unknown section(s) {', '.join(unknown)}")
        raw = copy.deepcopy(_plain(raw))
        system = raw.get("system")
        if not isinstance(system, dict):
            raise ConfigError("system: missing section")
        kind = system.get("kind", "general")
        if kind == "general":
            system = _section(raw, "system", GENERAL_KEYS,
                              {"d", "d1", "d2", "b", "theta", "B", "Theta", "pi0", "K", "delta", "T"})
        elif kind == "linear_gaussian":
            system = _section(raw, "system", LINEAR_KEYS,
                              {"A", "H", "theta", "Theta", "m0", "P0", "K", "delta", "T"})
        else:
            raise ConfigError(f"system.kind: unknown kind {kind!r}; known: general, linear_gaussian")
        system["kind"] = kind
        for key in ("K", "delta", "T"):
            system[key] = _positive(system[key], f"system.{key}")

        grid = _section(raw, "grid", GRID_KEYS, GRID_KEYS)
        grid = {k: _positive(grid[k], f"grid.{k}") for k in ("R", "h")}

        time = _section(raw, "time", TIME_KEYS, {"dt"})
        time["dt"] = _positive(time["dt"], "time.dt")
        time["path_dt"] = _positive(time.get("path_dt", time["dt"]), "time.path_dt")

        run = {**RUN_DEFAULTS, **_section(raw, "run", RUN_KEYS)}
        seeds = run["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds
        ):
            raise ConfigError("run.seeds: expected a non-empty list of non-negative integers")
        if run["snapshot_every"] is not None:
            run["snapshot_every"] = _positive(run["snapshot_every"], "run.snapshot_every", integer=True)
        if run["scheme"] not in SCHEMES:
            raise ConfigError(f"run.scheme: unknown scheme {run['scheme']!r}; known: {', '.join(SCHEMES)}")
        if run["transport"] not in TRANSPORTS:
            raise ConfigError(
                f"run.transport: unknown transport {run['transport']!r}; known: {', '.join(TRANSPORTS)}"
            )
        if run["noise"] not in NOISE_SCHEMES:
            raise ConfigError(
                f"run.noise: unknown scheme {run['noise']!r}; known: {', '.join(NOISE_SCHEMES)}"
            )

        oracle = {**ORACLE_DEFAULTS, **_section(raw, "oracle", ORACLE_KEYS)}
        n = oracle["particles"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 0:
            raise ConfigError("oracle.particles: expected a non-negative integer")
        if not isinstance(oracle["kalman"], bool):
            raise ConfigError("oracle.kalman: expected true or false")
        if oracle["kalman"] and kind != "linear_gaussian":
            raise ConfigError("oracle.kalman: needs system.kind linear_gaussian")

        output = raw.get("output", "out")
        if not isinstance(output, str) or not output:
            raise ConfigError("output: expected a directory name")

        cfg = cls(system, grid, time, run, oracle, output)
        cfg._validate()
        return cfg

    def _validate(self) -> None:
        T = self.system["T"]
        n_steps(T, self.time["dt"], "time.dt")
        n_steps(T, self.time["path_dt"], "time.path_dt")
        self.stride  # raises on a non-multiple
        spec = self.build_system()
        self.grid_spec(spec.d)
        if "mollify" in self.system:
            _positive(self.system["mollify"], "system.mollify", integer=True)

    # ------------------------------------------------------------------ IO

    @classmethod
    def load(cls, path: str | Path) -> ScenarioConfig:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy({
            "system": self.system,
            "grid": self.grid,
            "time": self.time,
            "run": self.run,
            "oracle": self.oracle,
            "output": self.output,
        })

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, **sections) -> ScenarioConfig:
        """Copy with some sections overridden key by key and re-validated."""
        raw = self.to_dict()
        for name, patch in sections.items():
            if isinstance(patch, dict) and isinstance(raw.get(name), dict):
                raw[name].update(patch)
            else:
                raw[name] = patch
        return ScenarioConfig.from_dict(raw)

    # ------------------------------------------------------------------ builders

    @property
    def stride(self) -> int:
        dt, pdt = self.time["dt"], self.time["path_dt"]
        k = int(round(dt / pdt))
        if k < 1 or abs(k * pdt - dt) > 1e-9 * dt:
            raise ConfigError(f"time.dt={dt} is not a multiple of time.path_dt={pdt}")
        return k

    def linear_spec(self) -> LinearGaussianSpec | None:
        s = self.system
        if s["kind"] != "linear_gaussian":
            return None
        try:
            return LinearGaussianSpec(
                A=s["A"], a0=s.get("a0", 0.0), H=s["H"], theta_const=s["theta"],
                Theta_const=s["Theta"], m0=s["m0"], P0=s["P0"], T=s["T"], K=s["K"],
                delta=s["delta"],
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"system: {exc}") from exc

    def build_system(self) -> SystemSpec:
        s = self.system
        name = s.get("name", "scenario")
        if s["kind"] == "linear_gaussian":
            return self.linear_spec().to_system_spec(name)
        d = _positive(s["d"], "system.d", integer=True)
        d1 = _positive(s["d1"], "system.d1", integer=True)
        d2 = _positive(s["d2"], "system.d2", integer=True)
        m = d1 - d
        if m < 1:
            raise ConfigError("system.d1 must exceed system.d")
        if not isinstance(s["pi0"], dict):
            raise ConfigError("system.pi0: expected a mapping with a 'kind'")
        spec = SystemSpec(
            d=d, d1=d1, d2=d2,
            b=build_coefficient(s["b"], d1, (d,), "system.b"),
            theta=build_coefficient(s["theta"], d1, (d, d2), "system.theta"),
            B=build_coefficient(s["B"], d1, (m,), "system.B"),
            Theta=build_coefficient(s["Theta"], m, (m, d2), "system.Theta"),
            K=s["K"], delta=s["delta"], T=s["T"],
            pi0=build_density(s["pi0"]),
            y0=s.get("y0"),
            name=name,
        )
        if s.get("mollify"):
            spec = mollify_theta(spec, int(s["mollify"]))
        return spec

    def grid_spec(self, d: int | None = None) -> GridSpec:
        if d is None:
            d = self.build_system().d
        return GridSpec.symmetric(self.grid["R"], self.grid["h"], d)
