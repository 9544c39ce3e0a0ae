"""Pipeline configuration: defaults, JSON schema, loading and overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import jsonschema

from .encoders import EncoderConfig

DEFAULT_DATASETS = [
    {"name": "visual", "kind": "visual", "num_classes": 4, "samples_per_class": 60, "noise_level": 0.5,
     "sampling_weight": 1.0},
    {"name": "clinical_a", "kind": "clinical", "num_classes": 2, "samples_per_class": 60, "noise_level": 0.5,
     "sampling_weight": 0.3, "class_names": ["normal", "abnormal"]},
    {"name": "clinical_b", "kind": "clinical", "num_classes": 2, "samples_per_class": 60, "noise_level": 0.5,
     "sampling_weight": 0.3, "class_names": ["wake", "sleep"]},
]

DEFAULT_CONFIG = {
    "paths": {"data_root": "data", "output_root": "runs"},
    "seed": 0,
    "data_seed": None,
    "alignment_mode": "trimodal",
    "data": {"split": [0.6, 0.2, 0.2], "datasets": DEFAULT_DATASETS},
    "encoder": asdict(EncoderConfig()),
    "tokenizer": {"codebook_size": 256, "decoder_steps": 1500, "decoder_lr": 0.05, "decoder_batch": 512},
    "proxy": {"enabled": True, "visual_anchor": True, "steps": 200, "batch_size": 32, "lr": 1e-3,
              "alpha": 0.5, "temperature": 0.07, "warmup_frac": 0.05},
    "stage1": {"enabled": True, "lambda_ei": 1.0, "lambda_et": 1.0, "lambda_it": 1.0, "alpha": 0.5,
               "temperature": 0.07, "batch_size": 32, "steps": 300, "lr": 1e-3, "warmup_frac": 0.05},
    "stage2": {"head_mode": "similarity", "temperature": 0.07, "layers": 2, "heads": 4, "steps": 400,
               "batch_size": 32, "lr": 2e-3, "tune_encoder": False},
    "stage3": {"dim": 64, "heads": 4, "layers": 2, "max_length": 128, "steps": 300, "batch_size": 32,
               "lr": 1e-3, "tune_scope": "head_only", "token_source": "predicted", "shuffle_labels": False},
    "ablation": {"seeds": [0, 1, 2, 3, 4], "modes": ["text_only", "image_only", "trimodal"]},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}
_count = {"type": "integer", "minimum": 0}
_bool = {"type": "boolean"}


def _block(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "paths": _block({"data_root": {"type": "string"}, "output_root": {"type": "string"}}),
        "seed": {"type": "integer", "minimum": 0},
        "data_seed": {"type": ["integer", "null"], "minimum": 0},
        "alignment_mode": {"enum": ["image_only", "text_only", "trimodal"]},
        "data": _block({
            "split": {"type": "array", "items": _nonneg, "minItems": 3, "maxItems": 3},
            "datasets": {"type": "array", "minItems": 1, "items": {
                "type": "object", "required": ["name", "kind"], "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "kind": {"enum": ["visual", "clinical"]},
                    "num_classes": {"type": "integer", "minimum": 2},
                    "samples_per_class": {"type": "integer", "minimum": 4},
                    "noise_level": _nonneg,
                    "sampling_weight": _pos,
                    "class_names": {"type": "array", "items": {"type": "string", "pattern": "^[a-z0-9_]+$"}},
                }}},
        }),
        "encoder": _block({k: _posint for k in asdict(EncoderConfig())}),
        "tokenizer": _block({"codebook_size": _posint, "decoder_steps": _count, "decoder_lr": _pos,
                             "decoder_batch": _posint}),
        "proxy": _block({"enabled": _bool, "visual_anchor": _bool, "steps": _count, "batch_size": _posint,
                         "lr": _pos, "alpha": _num, "temperature": _pos, "warmup_frac": _nonneg}),
        "stage1": _block({"enabled": _bool, "lambda_ei": _nonneg, "lambda_et": _nonneg, "lambda_it": _nonneg,
                          "alpha": _num, "temperature": _pos, "batch_size": _posint, "steps": _count,
                          "lr": _pos, "warmup_frac": _nonneg}),
        "stage2": _block({"head_mode": {"enum": ["similarity", "classifier"]}, "temperature": _pos,
                          "layers": _posint, "heads": _posint, "steps": _count, "batch_size": _posint,
                          "lr": _pos, "tune_encoder": _bool}),
        "stage3": _block({"dim": _posint, "heads": _posint, "layers": _posint, "max_length": _posint,
                          "steps": _count, "batch_size": _posint, "lr": _pos,
                          "tune_scope": {"enum": ["head_only", "head+predictor", "all"]},
                          "token_source": {"enum": ["predicted", "random", "zero"]},
                          "shuffle_labels": _bool}),
        "ablation": _block({"seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                            "modes": {"type": "array", "minItems": 1,
                                      "items": {"enum": ["image_only", "text_only", "trimodal"]}}}),
    },
}


class ConfigError(ValueError):
    """Schema or value violation; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(exc.message, path) from None
    if abs(sum(cfg["data"]["split"]) - 1.0) > 1e-9:
        raise ConfigError("split ratios must sum to 1", "data/split")
    names = [d["name"] for d in cfg["data"]["datasets"]]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate dataset names {names}", "data/datasets")
    if not any(d["kind"] == "visual" for d in cfg["data"]["datasets"]):
        raise ConfigError("at least one visual dataset is required", "data/datasets")
    for block in ("proxy", "stage1"):
        if not 0 < cfg[block]["alpha"] < 1:
            raise ConfigError("alpha must lie in (0, 1)", f"{block}/alpha")


def load_config(path=None, seed: int | None = None, out: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- overrides; relative paths resolve against the config file."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
        if not isinstance(user, dict):
            raise ConfigError("top level must be an object", str(path))
        cfg = merge(cfg, user)
        base_dir = path.resolve().parent
    if overrides:
        cfg = merge(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    for key in ("data_root", "output_root"):
        p = Path(cfg["paths"][key])
        cfg["paths"][key] = str(p if p.is_absolute() else (base_dir / p).resolve())
    if out is not None:
        cfg["paths"]["output_root"] = str(Path(out).resolve())
    return cfg


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()
