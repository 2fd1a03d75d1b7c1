"""Run configuration: YAML files with strict keys, defaults, and CLI
overrides.  Every run persists its fully resolved config next to its
outputs so results are reproducible from the artifact alone.
"""

from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .encoders import ModelConfig
from .losses import LossHyper
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = ("model", "loss", "train", "data")

_DATA_KEYS = {"manifest", "qa", "clips", "render_on_the_fly", "n", "seed"}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )


def load_run_config(
    path: str | Path | None = None, overrides: dict | None = None
):
    """Returns (ModelConfig, TrainConfig, data dict, resolved dict).

    Precedence: overrides > file > defaults.  Unknown keys anywhere are
    rejected.  ``overrides`` uses dotted keys like ``train.seed``.
    """
    raw: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("root", raw, set(_SECTIONS))
    for section in _SECTIONS:
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a mapping")

    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown override section {section!r}")
        raw[section][key] = value

    model_fields = {f.name for f in fields(ModelConfig)}
    loss_fields = {f.name for f in fields(LossHyper)}
    train_fields = {f.name for f in fields(TrainConfig)} - {"hyper"}
    _check_keys("model", raw["model"], model_fields)
    _check_keys("loss", raw["loss"], loss_fields)
    _check_keys("train", raw["train"], train_fields)
    _check_keys("data", raw["data"], _DATA_KEYS)

    try:
        model_cfg = ModelConfig(**raw["model"])
        hyper = LossHyper(**raw["loss"])
        train_kwargs = dict(raw["train"])
        if "betas" in train_kwargs:
            train_kwargs["betas"] = tuple(train_kwargs["betas"])
        train_cfg = TrainConfig(hyper=hyper, **train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    resolved = {
        "model": asdict(model_cfg),
        "loss": asdict(hyper),
        "train": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in asdict(train_cfg).items()
            if k != "hyper"
        },
        "data": dict(raw["data"]),
    }
    return model_cfg, train_cfg, dict(raw["data"]), resolved


def write_resolved(resolved: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_resolved.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(resolved, f, sort_keys=True)
    return path
