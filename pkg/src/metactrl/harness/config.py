"""Experiment configuration: JSON file, schema check, defaults, typed sub-configs."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np

from metactrl import dqn, nssm
from metactrl.meta import MetaConfig
from metactrl.mpc import MpcConfig


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_int = {"type": "integer"}
_obj = {"type": "object"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "learner": {"enum": ["nssm-mpc", "dqn"]},
        "plant": {
            "type": "object",
            "properties": {
                "family": {"enum": ["vdp", "ballplate", "lag"]},
                "dist": _obj,
                "overrides": _obj,
            },
            "required": ["family"],
        },
        "sources": {
            "type": "object",
            "properties": {
                "n_tasks": {"type": "integer", "minimum": 1},
                "length": {"type": "integer", "minimum": 2},
                "ar": _num,
                "step_frac": _num,
                "x0_range": _num,
                "max_retries": {"type": "integer", "minimum": 0},
            },
        },
        "target": {
            "type": "object",
            "properties": {
                "params": {"type": ["object", "null"]},
                "length": {"type": "integer", "minimum": 2},
            },
        },
        "nssm": _obj,
        "mpc": _obj,
        "dqn": _obj,
        "meta": _obj,
        "learner_opts": _obj,
        "reference": {
            "type": "object",
            "properties": {"kind": {"enum": ["circle", "square", "constant"]}},
        },
        "episode": {
            "type": "object",
            "properties": {"steps": {"type": "integer", "minimum": 1}, "x0": {"type": ["array", "null"]}},
        },
        "adapt": {
            "type": "object",
            "properties": {
                "steps": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "variants": {"type": "array", "items": {"enum": ["imaml", "maml", "supervised"]}},
                "supervised_init_seed": _int,
            },
        },
        "sim2sim": _obj,
    },
}

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "learner": "nssm-mpc",
    "plant": {"family": "vdp", "dist": {"mean": 0.0, "std": 1.0}, "overrides": {}},
    "sources": {"n_tasks": 10, "length": 2000, "ar": 0.9, "step_frac": 0.1, "x0_range": 1.0, "max_retries": 5},
    "target": {"params": None, "length": 300},
    "nssm": {"H": 8, "n_z": 8, "T": 16, "hidden": [64, 64], "u_scale": 1.0, "y_scale": 1.0},
    "mpc": {"N": 10, "Qw": 1.0, "Rw": 0.01},
    "dqn": {
        "hidden": [128, 128, 128], "stack_len": 1, "grid_points": 21, "discount": 0.9, "polyak_beta": 0.9,
        "Qw": 1.0, "Rw": 0.0, "eps_start": 0.3, "eps_end": 0.02, "eps_adapt": 0.05,
        "e_scale": 1.0, "u_scale": 1.0, "diff_scale": 0.0, "reduction": "mean",
    },
    "meta": {},
    "learner_opts": {},
    "reference": {"kind": "circle", "radius": 1.0, "period": 20.0},
    "episode": {"steps": 400, "x0": None},
    "adapt": {"steps": [0, 10, 100, 3000], "variants": ["imaml", "maml", "supervised"], "supervised_init_seed": 1},
    "sim2sim": {
        "duration": 150.0, "adapt_every": 50, "adapt_steps": 10, "batch": 128, "min_data": 50,
        "intermezzo": {"enabled": True, "period": 10.0, "duration": 0.5},
        "target_params": None, "x0": None,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> dict:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {loc}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    # family-specific defaults a user rarely wants to restate
    if cfg["plant"]["family"] != "vdp" and "dist" not in raw.get("plant", {}):
        cfg["plant"]["dist"] = {}
    try:
        meta_config(cfg)
        if cfg["learner"] == "nssm-mpc":
            nssm_config(cfg)
        if cfg["learner"] == "dqn":
            dqn_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sub-config: {exc}") from None
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = int(seed)
    return validate(raw)


# ------------------------------------------------------------ sub-configs

def io_dims(cfg: dict) -> tuple[int, int]:
    return {"vdp": (1, 2), "ballplate": (2, 2), "lag": (1, 1)}[cfg["plant"]["family"]]


def meta_config(cfg: dict, **over) -> MetaConfig:
    return MetaConfig(**{**cfg["meta"], **over})


def nssm_config(cfg: dict) -> nssm.NssmConfig:
    p, m = io_dims(cfg)
    d = dict(cfg["nssm"])
    d["hidden"] = tuple(d.get("hidden", (64, 64)))
    return nssm.NssmConfig(n_inputs=p, n_outputs=m, **d)


def _weight(w, n):
    w = np.asarray(w, dtype=np.float64)
    return w * np.eye(n) if w.ndim == 0 else (np.diag(w) if w.ndim == 1 else w)


def mpc_config(cfg: dict, plant) -> MpcConfig:
    p, m = io_dims(cfg)
    d = dict(cfg["mpc"])
    d["Qw"] = _weight(d.get("Qw", 1.0), m)
    d["Rw"] = _weight(d.get("Rw", 0.01), p)
    d.setdefault("u_low", plant.u_low)
    d.setdefault("u_high", plant.u_high)
    return MpcConfig(**d)


def dqn_config(cfg: dict, plant=None) -> dqn.DqnConfig:
    from metactrl.plants import make_plant

    plant = plant or make_plant(cfg["plant"]["family"], **cfg["plant"].get("overrides", {}))
    p, m = io_dims(cfg)
    d = dict(cfg["dqn"])
    net = dqn.QNetConfig(m, p, stack_len=int(d.pop("stack_len")), hidden=tuple(d.pop("hidden")),
                         e_scale=float(d.pop("e_scale")), u_scale=float(d.pop("u_scale")),
                         diff_scale=float(d.pop("diff_scale")))
    grid = dqn.uniform_grid(plant.u_low, plant.u_high, int(d.pop("grid_points")))
    return dqn.DqnConfig(net, grid, plant.u_low, plant.u_high, **d)
