"""Run configuration: JSON document with per-section defaults and overrides.

The defaults below are the contract-level constants (loss weights,
temperature, sample count, patch fraction, learning rates, epochs); tests
snapshot them, so changes here are semantic, not cosmetic.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .field import FieldArch
from .losses import StyleTask, load_negative_bank
from .renderer import RenderConfig
from .trainer import Stage1Config, Stage2Config, TrainConfig

DEFAULTS = {
    "dataset": {"path": None},
    "arch": {"pe_levels_pos": 6, "pe_levels_dir": 2,
             "hidden_width": 128, "depth": 4},
    "render": {"samples_per_ray": 192, "strategy": "stratified",
               "background": [0.0, 0.0, 0.0], "chunk": 8192},
    "stage1": {"epochs": 6, "lr": 5e-4, "rays_per_batch": 1024,
               "lr_decay": 1.0, "density_bias_init": 0.5, "holdout": []},
    "stage2": {"epochs": 4, "lr": 1e-3, "views_per_step": 1,
               "tile_size": 64, "freeze_density": False},
    "task": {"t_tgt": None, "t_src": "a photo", "negatives_file": None,
             "tau": 0.07, "lambda_g": 0.2, "lambda_l": 0.1,
             "lambda_p": 2.0, "lambda_r": 0.1,
             "patch_fraction": 1.0 / 10.0, "patches_per_view": 4,
             "negatives_per_step": 32},
    "provider": {"embedding": "toy:0", "extractor": "toy:0", "timeout": 30.0},
    "output_dir": "out",
    "seed": 0,
    "precision": "float64",
    "deterministic": False,
}


def parse_override(text: str) -> tuple[str, str, object]:
    """'section.key=value' with the value parsed as JSON when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ValidationError(f"override {text!r} is not section.key=value")
    dotted, raw = text.split("=", 1)
    section, key = dotted.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_config(path: str | Path, overrides: list[str] = ()) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}") from e
    config = copy.deepcopy(DEFAULTS)
    for section, values in doc.items():
        if section not in config:
            raise ValidationError(f"unknown config section {section!r}")
        if isinstance(config[section], dict):
            if not isinstance(values, dict):
                raise ValidationError(f"section {section!r} must be an object")
            for key, value in values.items():
                if key not in config[section]:
                    raise ValidationError(f"unknown key {section}.{key}")
                config[section][key] = value
        else:
            config[section] = values
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in config:
            raise ValidationError(f"unknown config section {section!r}")
        if isinstance(config[section], dict):
            if key not in config[section]:
                raise ValidationError(f"unknown key {section}.{key}")
            config[section][key] = value
        else:
            raise ValidationError(f"section {section!r} has no keys")
    return config


def build_arch(config: dict) -> FieldArch:
    return FieldArch(**config["arch"])


def build_render(config: dict, near: float | None = None,
                 far: float | None = None) -> RenderConfig:
    kw = dict(config["render"])
    kw["background"] = tuple(kw["background"])
    if near is not None:
        kw["near"] = near
    if far is not None:
        kw["far"] = far
    kw["jitter_seed"] = config["seed"]
    return RenderConfig(**kw)


def build_train_config(config: dict, near: float | None = None,
                       far: float | None = None) -> TrainConfig:
    s1 = dict(config["stage1"])
    s1["holdout"] = tuple(s1["holdout"])
    s2 = dict(config["stage2"])
    s2.pop("views_per_step", None)  # fixed at one view per step
    return TrainConfig(stage1=Stage1Config(**s1), stage2=Stage2Config(**s2),
                       render=build_render(config, near, far),
                       seed=config["seed"], precision=config["precision"])


def default_negative_bank() -> list[str]:
    ref = resources.files("radiart").joinpath("data/negatives_default.txt")
    with resources.as_file(ref) as path:
        return load_negative_bank(path)


def build_task(config: dict) -> StyleTask:
    section = dict(config["task"])
    if not section.get("t_tgt"):
        raise ValidationError("task.t_tgt (target prompt) is required")
    negatives_file = section.pop("negatives_file")
    if negatives_file:
        negatives = load_negative_bank(negatives_file)
    else:
        negatives = default_negative_bank()
    return StyleTask(negatives=tuple(negatives), **section)
