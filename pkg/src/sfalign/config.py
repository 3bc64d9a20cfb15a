"""JSON run configuration: load, merge, validate, write back.

A run config is a JSON object with two optional sections, "model" and
"train", whose keys mirror the ModelConfig / TrainConfig dataclasses (the
model section nests a "fam" object). Command-line flags are merged on top of
the file, and the merged effective config is written next to the run's
outputs so every run is reproducible from its artifacts alone.

Typos are hard errors: every unknown key across all sections is collected
and reported in one ConfigError.
"""

import dataclasses
import json

from .errors import ConfigError
from .fam import FamConfig
from .model import ModelConfig
from .train import TrainConfig


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def deep_merge(base, override):
    """Recursively merge nested dicts; override wins on leaves."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _collect_unknown(section, data, cls, bad):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    for key in data:
        if key not in _field_names(cls):
            bad.append(f"{section}.{key}")


def build_configs(raw, require_train=True):
    """Turn a merged config dict into validated (ModelConfig, TrainConfig).

    The train section must carry total_iters; everything else defaults.
    Commands that only need the model (eval, bench, viz) pass
    require_train=False and get train_cfg=None when total_iters is absent.
    """
    bad = [key for key in raw if key not in ("model", "train")]
    for section in ("model", "train"):
        if not isinstance(raw.get(section, {}), dict):
            raise ConfigError(f"section {section!r} must be an object")
    model_raw = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    fam_raw = model_raw.pop("fam", {})
    if not isinstance(fam_raw, dict):
        raise ConfigError("section 'model.fam' must be an object")
    _collect_unknown("model", model_raw, ModelConfig, bad)
    _collect_unknown("model.fam", fam_raw, FamConfig, bad)
    _collect_unknown("train", train_raw, TrainConfig, bad)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(bad))}")

    for key in ("stage_channels", "ppm_bins"):
        if key in model_raw:
            model_raw[key] = tuple(model_raw[key])
    if "scale_range" in train_raw:
        train_raw["scale_range"] = tuple(train_raw["scale_range"])

    model_cfg = ModelConfig(fam=FamConfig(**fam_raw), **model_raw)
    model_cfg.validate()
    if "total_iters" not in train_raw:
        if require_train:
            raise ConfigError("train.total_iters is required")
        return model_cfg, None
    train_cfg = TrainConfig(**train_raw)
    train_cfg.validate()
    return model_cfg, train_cfg


def load_config_file(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: config file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return raw


def config_to_dict(model_cfg, train_cfg):
    """JSON-ready dict of the effective configuration."""
    return {"model": dataclasses.asdict(model_cfg),
            "train": dataclasses.asdict(train_cfg)}


def write_effective_config(model_cfg, train_cfg, path):
    with open(path, "w") as f:
        json.dump(config_to_dict(model_cfg, train_cfg), f, indent=2,
                  sort_keys=True)
        f.write("\n")
