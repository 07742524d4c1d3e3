"""Run configuration and reporting.

Configs are flat JSON objects validated strictly: unknown keys and wrong
types fail with the offending JSON path instead of being ignored.  A
report carries the canonical config hash so runs can be tied back to
their exact inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigurationError

_DRIVERS = ("ito", "piecewise_linear", "geometrified", "file")


@dataclass(frozen=True)
class ScenarioConfig:
    model: str = "bounded_nonlinear"
    model_params: dict = field(default_factory=dict)
    horizon: float | None = None
    steps: int = 256
    alpha: float = 0.45
    seed: int = 0
    particles: int = 10_000
    refine: int = 16
    driver: str = "ito"
    driver_file: str | None = None
    bm_substeps: int = 1
    phis: list | None = None
    spans: list = field(default_factory=lambda: [16, 32, 64, 128])
    checkpoints: int = 8
    grid_points: int = 64
    inner_particles: int = 10_000
    perturbations: list = field(default_factory=lambda: [
        {"kind": "geometrify", "amount": 0.0},
        {"kind": "area_shift", "amount": 0.4},
        {"kind": "area_shift", "amount": 0.2},
        {"kind": "area_shift", "amount": 0.1},
        {"kind": "area_shift", "amount": 0.05},
        {"kind": "area_shift", "amount": 0.025},
    ])
    threads: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.driver not in _DRIVERS:
            raise ConfigurationError(
                f"$.driver: {self.driver!r} is not one of {_DRIVERS}")
        if self.driver == "file" and not self.driver_file:
            raise ConfigurationError("$.driver_file: required when driver is 'file'")
        if not (1 / 3 < self.alpha <= 1 / 2):
            raise ConfigurationError(f"$.alpha: {self.alpha} outside (1/3, 1/2]")
        for name in ("steps", "particles", "refine", "bm_substeps",
                     "checkpoints", "grid_points", "inner_particles", "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"$.{name}: must be a positive integer, got {v!r}")

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


_TYPES = {
    "model": str,
    "model_params": dict,
    "horizon": (int, float, type(None)),
    "steps": int,
    "alpha": (int, float),
    "seed": int,
    "particles": int,
    "refine": int,
    "driver": str,
    "driver_file": (str, type(None)),
    "bm_substeps": int,
    "phis": (list, type(None)),
    "spans": list,
    "checkpoints": int,
    "grid_points": int,
    "inner_particles": int,
    "perturbations": list,
    "threads": int,
    "out": (str, type(None)),
}


def config_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"$: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(ScenarioConfig)}
    out = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(f"$.{key}: unknown key")
        want = _TYPES[key]
        if isinstance(value, bool) or not isinstance(value, want):
            raise ConfigurationError(
                f"$.{key}: expected {getattr(want, '__name__', want)}, "
                f"got {type(value).__name__}")
        out[key] = value
    if "spans" in out:
        for j, s in enumerate(out["spans"]):
            if isinstance(s, bool) or not isinstance(s, int) or s < 1:
                raise ConfigurationError(f"$.spans[{j}]: must be a positive integer")
    if "phis" in out and out["phis"] is not None:
        for j, name in enumerate(out["phis"]):
            if not isinstance(name, str):
                raise ConfigurationError(f"$.phis[{j}]: must be a string")
    if "perturbations" in out:
        for j, p in enumerate(out["perturbations"]):
            if not isinstance(p, dict):
                raise ConfigurationError(f"$.perturbations[{j}]: expected an object")
            extra = set(p) - {"kind", "amount"}
            if extra:
                raise ConfigurationError(
                    f"$.perturbations[{j}].{sorted(extra)[0]}: unknown key")
            if not isinstance(p.get("kind"), str):
                raise ConfigurationError(f"$.perturbations[{j}].kind: must be a string")
            amt = p.get("amount", 0.0)
            if isinstance(amt, bool) or not isinstance(amt, (int, float)):
                raise ConfigurationError(f"$.perturbations[{j}].amount: must be a number")
    return ScenarioConfig(**out)


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


@dataclass
class RunReport:
    command: str
    config_hash: str
    metrics: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    exit_code: int = 0

    def as_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash,
                "metrics": self.metrics, "flags": self.flags,
                "outputs": list(self.outputs), "exit_code": self.exit_code}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True, default=_jsonable)

    def write(self, path: str) -> str:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")
        return path


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
