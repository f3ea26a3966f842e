"""YAML experiment configuration with strict schema checking.

Every section and key is listed in ``SCHEMA``; unknown keys, wrong types and
out-of-range values raise :class:`ConfigError` naming the offending field.
The canonical layout with defaults lives in ``configs/default.yaml``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .client import DpBudget
from .orchestrator import MODES, DataConfig, RunConfig, Topology


class ConfigError(ValueError):
    pass


_NUM = (int, float)

# section -> key -> (accepted types, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "data": {
        "num_source_domains": (int, 3),
        "num_classes": (int, 4),
        "per_domain": (int, 120),
        "image_size": (int, 12),
        "channels": (int, 3),
        "lambda": (_NUM, 1.0),
    },
    "topology": {
        "stations": (int, 3),
        "clients_per_station": (int, 3),
        "active_fraction": (_NUM, 1.0),
    },
    "training": {
        "rounds": (int, 20),
        "station_rounds": (int, 3),
        "epochs": (int, 4),
        "batch_size": (int, 32),
        "lr": (_NUM, 0.05),
        "lr_schedule": (str, "cosine"),
        "algorithm": (str, "fedavg"),
        "prox_mu": (_NUM, 0.01),
        "workers": (int, 1),
    },
    "hfedatm": {
        "lambda_ot": (_NUM, 0.05),
        "sinkhorn_iters": (int, 25),
        "alpha": (_NUM, 0.75),
        "gamma": (str, "active_clients"),
        "reference_station": (int, 0),
    },
    "privacy": {
        "epsilon": (_NUM, math.inf),
        "delta": (_NUM, 1e-5),
        "clip": ((int, float, type(None)), None),
    },
    "output": {
        "timings_in_metrics": (bool, False),
        "checkpoints": (bool, True),
        "station_artifacts": (bool, False),
    },
}
TOP_LEVEL: Dict[str, tuple] = {
    "seeds": (list, [0]),
    "modes": (list, list(MODES)),
    "output_dir": (str, "runs/default"),
}


def defaults() -> Dict[str, Any]:
    out: Dict[str, Any] = {k: copy.deepcopy(v[1]) for k, v in TOP_LEVEL.items()}
    for section, keys in SCHEMA.items():
        out[section] = {k: copy.deepcopy(v[1]) for k, v in keys.items()}
    return out


def _check_type(path: str, value: Any, types) -> Any:
    if isinstance(value, bool) and types is not bool and not (isinstance(types, tuple) and bool in types):
        raise ConfigError(f"{path}: expected {types}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {getattr(types, '__name__', types)}, got {type(value).__name__}")
    return value


def validate(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Merge ``raw`` over the defaults, rejecting unknown keys and bad types."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = defaults()
    for key, value in raw.items():
        if key in TOP_LEVEL:
            cfg[key] = _check_type(key, value, TOP_LEVEL[key][0])
        elif key in SCHEMA:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: section must be a mapping")
            for sub, sval in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                cfg[key][sub] = _check_type(f"{key}.{sub}", sval, SCHEMA[key][sub][0])
        else:
            raise ConfigError(f"{key}: unknown key")

    if not cfg["seeds"] or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg["seeds"]):
        raise ConfigError("seeds: must be a non-empty list of non-negative integers")
    if not cfg["modes"] or any(m not in MODES for m in cfg["modes"]):
        raise ConfigError(f"modes: entries must be in {MODES}")
    for name, section in (("data", cfg["data"]), ("topology", cfg["topology"])):
        for k, v in section.items():
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ConfigError(f"{name}.{k}: must be >= 1")
    if not 0.0 <= cfg["data"]["lambda"] <= 1.0:
        raise ConfigError("data.lambda: must lie in [0, 1]")
    if cfg["data"]["num_source_domains"] < 1:
        raise ConfigError("data.num_source_domains: must be >= 1")
    priv = cfg["privacy"]
    if not priv["epsilon"] > 0:
        raise ConfigError("privacy.epsilon: must be positive (.inf disables noise)")
    if not 0 < priv["delta"] < 1:
        raise ConfigError("privacy.delta: must lie in (0, 1)")
    if priv["clip"] is not None and not priv["clip"] > 0:
        raise ConfigError("privacy.clip: must be positive or null")
    if math.isfinite(priv["epsilon"]) and priv["clip"] is None:
        priv["clip"] = 1.0
    if cfg["hfedatm"]["reference_station"] >= cfg["topology"]["stations"]:
        raise ConfigError("hfedatm.reference_station: must index an existing station")
    # building the runtime objects runs their own range checks
    try:
        run_configs(cfg, cfg["seeds"][0], cfg["modes"][0])
        data_config(cfg)
        topology(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    return validate(raw or {})


def apply_overrides(cfg: Dict[str, Any], seed: Optional[int] = None, lam: Optional[float] = None,
                    mode: Optional[str] = None, dp_eps: Optional[float] = None) -> Dict[str, Any]:
    raw = copy.deepcopy(cfg)
    if seed is not None:
        raw["seeds"] = [seed]
    if lam is not None:
        raw["data"]["lambda"] = lam
    if mode is not None:
        raw["modes"] = [mode]
    if dp_eps is not None:
        raw["privacy"]["epsilon"] = dp_eps
    return validate(raw)


def dp_budget(cfg: Dict[str, Any]) -> Optional[DpBudget]:
    priv = cfg["privacy"]
    if math.isinf(priv["epsilon"]) and priv["clip"] is None:
        return None
    return DpBudget(float(priv["epsilon"]), float(priv["delta"]), float(priv["clip"] or 1.0))


def run_configs(cfg: Dict[str, Any], seed: int, mode: str) -> RunConfig:
    t, h = cfg["training"], cfg["hfedatm"]
    return RunConfig(
        rounds=t["rounds"], station_rounds=t["station_rounds"], epochs=t["epochs"],
        batch_size=t["batch_size"], lr=float(t["lr"]), lr_schedule=t["lr_schedule"],
        algorithm=t["algorithm"], prox_mu=float(t["prox_mu"]), lambda_ot=float(h["lambda_ot"]),
        sinkhorn_iters=h["sinkhorn_iters"], alpha=float(h["alpha"]), gamma=h["gamma"],
        dp=dp_budget(cfg), mode=mode, seed=seed, reference_station=h["reference_station"],
        workers=t["workers"])


def data_config(cfg: Dict[str, Any]) -> DataConfig:
    d = cfg["data"]
    return DataConfig(d["num_source_domains"], d["num_classes"], d["per_domain"], d["image_size"],
                      d["channels"], float(d["lambda"]))


def topology(cfg: Dict[str, Any]) -> Topology:
    t = cfg["topology"]
    return Topology(t["stations"], t["clients_per_station"], float(t["active_fraction"]))


def to_json(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """JSON-safe copy (infinite epsilon becomes the string ``"inf"``)."""
    out = copy.deepcopy(cfg)
    if math.isinf(out["privacy"]["epsilon"]):
        out["privacy"]["epsilon"] = "inf"
    return out


def from_json(data: Dict[str, Any]) -> Dict[str, Any]:
    raw = copy.deepcopy(data)
    if raw.get("privacy", {}).get("epsilon") == "inf":
        raw["privacy"]["epsilon"] = math.inf
    return validate(raw)
