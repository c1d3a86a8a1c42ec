"""Declarative run configuration with leaf overrides and chained stage hashes.

A run is configured by one JSON document. Command-line ``--set a.b=value``
flags may replace existing leaves only; environment variables may only
redirect the four artifact directories. Every stage hashes the configuration
sections it depends on together with the hash of the stage before it, so an
artifact produced under one configuration is never silently consumed under
another.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .gapnet.params import GapConfig
from .sap import FlopsModel
from .scenesim import PlantConfig, SceneDims
from .search import SearchConfig

ENV_PATHS = {
    "OBJPRUNE_DATA_DIR": "data",
    "OBJPRUNE_ORACLE_DIR": "oracle",
    "OBJPRUNE_CHECKPOINT_DIR": "checkpoints",
    "OBJPRUNE_REPORT_DIR": "reports",
}

# GapConfig fields that are fixed by the scene generator rather than chosen
_DERIVED_GAP_FIELDS = ("vocab_size", "d_p", "d_v")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {
        "data": "run/data",
        "oracle": "run/oracle",
        "checkpoints": "run/checkpoints",
        "reports": "run/reports",
    },
    "scene": {
        "train_count": 2000,
        "val_count": 200,
        "test_count": 200,
        "n_min": 8,
        "n_max": 64,
        "d_p": 32,
        "d_v": 32,
        "n_classes": 8,
        "n_filler": 64,
        "world_seed": 0,
        "plant": {f.name: f.default for f in fields(PlantConfig)},
    },
    "teacher": {"noise_sigma": 0.25, "layers": 4, "heads": 4, "gain": 4.0},
    "gap": {
        "hidden_dim": 64,
        "num_heads": 4,
        "encoder_layers": 2,
        "decoder_layers": 2,
        "ffn_mult": 2,
        "lam": 0.02,
        "margin": 0.01,
        "temperature": 0.5,
        "lr": 2e-3,
        "weight_decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "epochs": 20,
        "batch_size": 32,
        "warmup_steps": 0,
        "seed": 0,
        "max_prompt_len": 32,
        "augment": True,
    },
    "search": {
        "epsilon": 1e-4,
        "alpha_min": 0.0,
        "alpha_max": 2.0,
        "max_iters": 200,
        "min_retain": 1,
        "monotone_depth": True,
    },
    "flops": {"depth": 32, "d_model": 4096, "d_ff": 11008},
    "eval": {
        "topk": 10,
        "budgets": [
            {"name": "keep_all", "drop_layer": 1, "ratio": 0.0},
            {"name": "k16_p70", "drop_layer": 16, "ratio": 0.70},
            {"name": "k6_p80", "drop_layer": 6, "ratio": 0.80},
            {"name": "k2_p95", "drop_layer": 2, "ratio": 0.95},
        ],
    },
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be an object")
            out[key] = _merge(out[key], value, path)
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Replace one existing leaf, written as ``dotted.key=value`` (value as JSON)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"{key!r} is not an existing leaf")
    node[leaf] = _parse_value(raw)
    return cfg


def load_config(path: str | Path | None = None, overrides=(), environ=None) -> dict:
    """Defaults, then the file, then path environment variables, then ``--set`` leaves."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    environ = os.environ if environ is None else environ
    for var, key in ENV_PATHS.items():
        if environ.get(var):
            cfg["paths"][key] = environ[var]
    cfg = copy.deepcopy(cfg)
    for assignment in overrides:
        apply_override(cfg, assignment)
    validate(cfg)
    return cfg


def scene_dims(cfg: dict) -> SceneDims:
    sc = cfg["scene"]
    return SceneDims(
        d_id=int(cfg["gap"]["hidden_dim"]),
        d_p=int(sc["d_p"]),
        d_v=int(sc["d_v"]),
        n_classes=int(sc["n_classes"]),
        n_filler=int(sc["n_filler"]),
        world_seed=int(sc["world_seed"]),
    )


def plant_config(cfg: dict) -> PlantConfig:
    return PlantConfig(**cfg["scene"]["plant"])


def gap_config(cfg: dict) -> GapConfig:
    dims = scene_dims(cfg)
    return GapConfig(**cfg["gap"], vocab_size=dims.vocab_size, d_p=dims.d_p, d_v=dims.d_v)


def search_config(cfg: dict, budget: float = 0.1) -> SearchConfig:
    return SearchConfig(**cfg["search"], budget=budget, budget_is_fraction=True)


def flops_model(cfg: dict) -> FlopsModel:
    return FlopsModel(**cfg["flops"])


def validate(cfg: dict) -> None:
    """Type and range checks that need the whole document; raises ConfigError."""
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer")
    paths = [str(Path(p)) for p in cfg["paths"].values()]
    if len(set(paths)) != len(paths):
        raise ConfigError("artifact paths must be distinct")
    sc = cfg["scene"]
    for key in ("train_count", "val_count", "test_count", "n_min", "n_max"):
        if not isinstance(sc[key], int) or sc[key] < 0:
            raise ConfigError(f"scene.{key} must be a non-negative integer")
    if not 1 <= sc["n_min"] <= sc["n_max"]:
        raise ConfigError("need 1 <= scene.n_min <= scene.n_max")
    if cfg["teacher"]["noise_sigma"] < 0:
        raise ConfigError("teacher.noise_sigma must be >= 0")
    for key in _DERIVED_GAP_FIELDS:
        if key in cfg["gap"]:
            raise ConfigError(f"gap.{key} is derived from the scene section")
    budgets = cfg["eval"]["budgets"]
    names = [b.get("name") for b in budgets]
    if len(set(names)) != len(names) or not all(isinstance(n, str) and n for n in names):
        raise ConfigError("eval budgets need unique non-empty names")
    try:
        gap_config(cfg)
        search_config(cfg)
        fm = flops_model(cfg)
        plant_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for b in budgets:
        if not 1 <= b["drop_layer"] <= fm.depth or not 0 <= b["ratio"] <= 1:
            raise ConfigError(f"budget {b['name']!r} is outside 1 <= drop_layer <= depth, 0 <= ratio <= 1")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


STAGE_SECTIONS = {
    "gen": ("seed", "scene"),
    "extract": ("teacher",),
    "train": ("gap",),
    "search": ("search", "flops", "eval"),
    "eval": ("eval",),
}
STAGE_ORDER = ("gen", "extract", "train", "search", "eval")


def stage_hash(cfg: dict, stage: str) -> str:
    """Hash of ``stage``'s own sections chained onto the previous stage's hash."""
    upstream = ""
    for name in STAGE_ORDER:
        upstream = _digest({"upstream": upstream, "stage": name,
                            "sections": {k: cfg[k] for k in STAGE_SECTIONS[name]}})
        if name == stage:
            return upstream
    raise KeyError(stage)


def upstream_stage(stage: str) -> str | None:
    i = STAGE_ORDER.index(stage)
    return STAGE_ORDER[i - 1] if i else None
