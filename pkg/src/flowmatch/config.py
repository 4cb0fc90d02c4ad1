"""Run configuration files (JSON) and their validation.

Schema (``schema_version`` 1)::

    {
      "schema_version": 1,
      "seed": 0,
      "out": "runs/ot_checkerboard",
      "dataset":   {"kind": "checkerboard"},      # or {"kind": "quantized", "dim": 4}
      "schedule":  {"kind": "ot", "sigma_min": 1e-4},
      "model":     {"widths": [64, 64, 64], "activation": "silu",
                    "embedding": "concat", "frequencies": 8},
      "objective": "cfm",
      "optimizer": {"lr": 5e-3, "steps": 20000, "batch": 256, "betas": [0.9, 0.999],
                    "eps": 1e-8, "weight_decay": 0.0, "lr_schedule": "cosine",
                    "checkpoint_every": 0, "stratified_t": false},
      "solver":    {"method": "dopri5", "atol": 1e-5, "rtol": 1e-5, "steps": 100,
                    "max_nfe": 100000}
    }

``model`` may also name a ``preset`` ("desk" or "paper-2d"). The model's
output parameterization is implied by the objective.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import SPEC_KINDS, spec_dim
from .model import ACTIVATIONS, EMBEDDINGS, PRESETS
from .objectives import LOSSES
from .ode import METHODS
from .paths import schedule_from_config

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out": "runs/default",
    "dataset": {"kind": "checkerboard"},
    "schedule": {"kind": "ot", "sigma_min": 1e-4},
    "model": {"widths": [64, 64, 64], "activation": "silu", "embedding": "concat", "frequencies": 8},
    "objective": "cfm",
    "optimizer": {"lr": 5e-3, "steps": 20000, "batch": 256, "betas": [0.9, 0.999], "eps": 1e-8,
                  "weight_decay": 0.0, "lr_schedule": "cosine", "checkpoint_every": 0,
                  "stratified_t": False},
    "solver": {"method": "dopri5", "atol": 1e-5, "rtol": 1e-5, "steps": 100, "max_nfe": 100000},
}

_SECTIONS = {"dataset", "schedule", "model", "optimizer", "solver"}
_TOP = set(DEFAULTS)


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key '{key}': {msg}")
        self.key = key


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "schedule":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: str, got: dict, allowed: set) -> None:
    for k in got:
        if k not in allowed:
            raise ConfigError(f"{section}.{k}", "unknown key")


def validate(cfg: dict) -> dict:
    for k in cfg:
        if k not in _TOP:
            raise ConfigError(k, "unknown key")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}")
    for s in _SECTIONS:
        if not isinstance(cfg.get(s), dict):
            raise ConfigError(s, "must be an object")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")

    _check_keys("dataset", cfg["dataset"], {"kind", "dim"})
    if cfg["dataset"].get("kind") not in SPEC_KINDS:
        raise ConfigError("dataset.kind", f"must be one of {list(SPEC_KINDS)}")
    try:
        spec_dim(cfg["dataset"])
    except ValueError as err:
        raise ConfigError("dataset.dim", str(err)) from None

    try:
        schedule_from_config(cfg["schedule"])
    except (ValueError, TypeError) as err:
        raise ConfigError("schedule", str(err)) from None

    m = cfg["model"]
    _check_keys("model", m, {"widths", "activation", "embedding", "frequencies", "preset"})
    if "preset" in m and m["preset"] not in PRESETS:
        raise ConfigError("model.preset", f"must be one of {sorted(PRESETS)}")
    if not (isinstance(m.get("widths"), list) and m["widths"] and all(isinstance(w, int) and w > 0 for w in m["widths"])):
        raise ConfigError("model.widths", "must be a non-empty list of positive integers")
    if m.get("activation") not in ACTIVATIONS:
        raise ConfigError("model.activation", f"must be one of {sorted(ACTIVATIONS)}")
    if m.get("embedding") not in EMBEDDINGS:
        raise ConfigError("model.embedding", f"must be one of {list(EMBEDDINGS)}")

    if cfg["objective"] not in LOSSES:
        raise ConfigError("objective", f"must be one of {sorted(LOSSES)}")
    if cfg["objective"] != "cfm" and cfg["schedule"].get("kind") != "vp":
        raise ConfigError("objective", "diffusion objectives sample with the VP path only")

    o = cfg["optimizer"]
    _check_keys("optimizer", o, set(DEFAULTS["optimizer"]))
    if not (isinstance(o["lr"], (int, float)) and o["lr"] >= 0):
        raise ConfigError("optimizer.lr", "must be >= 0")
    if not (isinstance(o["steps"], int) and o["steps"] >= 0):
        raise ConfigError("optimizer.steps", "must be a non-negative integer")
    if not (isinstance(o["batch"], int) and o["batch"] >= 1):
        raise ConfigError("optimizer.batch", "must be a positive integer")
    if o["lr_schedule"] not in ("constant", "cosine"):
        raise ConfigError("optimizer.lr_schedule", "must be 'constant' or 'cosine'")

    s = cfg["solver"]
    _check_keys("solver", s, set(DEFAULTS["solver"]))
    if s["method"] not in METHODS:
        raise ConfigError("solver.method", f"must be one of {list(METHODS)}")
    if not (s["atol"] > 0 and s["rtol"] > 0):
        raise ConfigError("solver.atol", "tolerances must be positive")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<file>", "top level must be an object")
    if "model" in raw and "preset" in raw["model"]:
        preset = raw["model"]["preset"]
        if preset not in PRESETS:
            raise ConfigError("model.preset", f"must be one of {sorted(PRESETS)}")
        raw = _merge(raw, {"model": {**PRESETS[preset], **raw["model"]}})
    return validate(_merge(DEFAULTS, raw))


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


@dataclass
class RunPaths:
    out: Path

    @property
    def checkpoint(self) -> Path:
        return self.out / "checkpoint.json"

    @property
    def losses(self) -> Path:
        return self.out / "losses.csv"

    @property
    def config(self) -> Path:
        return self.out / "config.json"
