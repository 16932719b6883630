"""Run configuration: a single strict-schema JSON document.

Sections: ``model`` (architecture), ``train`` (optimization), ``data``
(weighted source mixture), ``eval`` (protocol parameters). Unknown keys are
rejected so ablation overrides (dotted ``--set`` paths) cannot silently
miss. Quantile presets map K in {9, 21, 99} to the standard level grids.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

QUANTILE_PRESETS: dict[int, tuple[float, ...]] = {
    9: tuple(round(0.1 * i, 2) for i in range(1, 10)),
    21: (0.01, 0.05) + tuple(round(0.1 + 0.05 * i, 2) for i in range(17)) + (0.95, 0.99),
    99: tuple(round(0.01 * i, 2) for i in range(1, 100)),
}

_MODEL_KEYS = {
    "T": int, "L": int, "n_layer": int, "d": int, "head_dim": int,
    "K": int, "quantile_levels": list, "ffn_mult": int,
}
_TRAIN_KEYS = {
    "total_steps": int, "batch_size": int, "peak_lr": float, "min_lr": float,
    "warmup_fraction": float, "weight_decay": float, "betas": list,
    "grad_clip": float, "mask_ratio": float, "n_cpm": int, "seed": int,
    "checkpoint_every": int,
}
_SOURCE_KEYS = {
    "kind": str, "path": str, "num": int, "length": int, "weight": float, "seed": int,
}
_DATA_KEYS = {"sources": list, "clean_exclusions": str}
_EVAL_KEYS = {
    "dataset": str, "seasonality": int, "horizon": int, "windows": int,
    "mase_variant": str,
}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS, "eval": _EVAL_KEYS}
SOURCE_KINDS = ("real", "kernelsynth", "tsmixup")


def _check_keys(section: str, obj: dict, allowed: dict) -> None:
    for key, value in obj.items():
        if key not in allowed:
            raise ConfigError(f"{section}: unknown key {key!r} (allowed: {sorted(allowed)})")
        expected = allowed[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if value is not None and not isinstance(value, expected):
            raise ConfigError(f"{section}.{key}: expected {expected.__name__}, got {type(value).__name__}")


def validate_run_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("run config must be a JSON object")
    for section in cfg:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} (allowed: {sorted(_SECTIONS)})")
    for required in ("model", "train"):
        if required not in cfg:
            raise ConfigError(f"missing config section {required!r}")
    for section, allowed in _SECTIONS.items():
        if section in cfg:
            if not isinstance(cfg[section], dict):
                raise ConfigError(f"section {section!r} must be an object")
            _check_keys(section, cfg[section], allowed)

    sources = cfg.get("data", {}).get("sources", [])
    for i, src in enumerate(sources):
        if not isinstance(src, dict):
            raise ConfigError(f"data.sources[{i}] must be an object")
        _check_keys(f"data.sources[{i}]", src, _SOURCE_KEYS)
        kind = src.get("kind")
        if kind not in SOURCE_KINDS:
            raise ConfigError(f"data.sources[{i}].kind must be one of {SOURCE_KINDS}, got {kind!r}")
        if kind == "real" and "path" not in src:
            raise ConfigError(f"data.sources[{i}]: real source needs a 'path'")
        if kind in ("kernelsynth", "tsmixup"):
            for needed in ("num", "length"):
                if needed not in src:
                    raise ConfigError(f"data.sources[{i}]: {kind} source needs '{needed}'")
        if kind == "tsmixup" and "path" not in src:
            raise ConfigError(f"data.sources[{i}]: tsmixup source needs a 'path' (mixing pool)")
    return cfg


def load_run_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return validate_run_config(cfg)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like ``train.mask_ratio=0.6``."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        if len(keys) < 2:
            raise ConfigError(f"--set path must be section.key, got {path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                node[k] = node.get(k) if isinstance(node.get(k), dict) else {}
            node = node[k]
        node[keys[-1]] = value
    return validate_run_config(cfg)


def resolve_quantile_levels(model_section: dict) -> tuple[float, ...]:
    has_k = "K" in model_section
    has_levels = "quantile_levels" in model_section
    if has_k == has_levels:
        raise ConfigError("model: specify exactly one of 'K' (preset) or 'quantile_levels'")
    if has_levels:
        return tuple(float(q) for q in model_section["quantile_levels"])
    k = model_section["K"]
    if k == 1:
        return (0.5,)
    if k not in QUANTILE_PRESETS:
        raise ConfigError(f"model.K={k} has no preset (use {sorted(QUANTILE_PRESETS)} or explicit levels)")
    return QUANTILE_PRESETS[k]


def model_config_from(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    for required in ("T", "L", "n_layer", "d"):
        if required not in m:
            raise ConfigError(f"model: missing required key {required!r}")
    return ModelConfig(
        context_length=m["T"],
        patch_size=m["L"],
        n_layers=m["n_layer"],
        d_model=m["d"],
        quantile_levels=resolve_quantile_levels(m),
        head_dim=m.get("head_dim"),
        ffn_mult=m.get("ffn_mult", 4),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    for required in ("total_steps", "batch_size"):
        if required not in t:
            raise ConfigError(f"train: missing required key {required!r}")
    if "betas" in t:
        t["betas"] = tuple(t["betas"])
    return TrainConfig(**t)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:12]
