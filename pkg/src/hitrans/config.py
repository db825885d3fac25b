"""Run configuration: presets, JSON config files and ``--set`` overrides.

Resolution order, later wins: built-in defaults, the chosen preset, the
config file, ``--set key=value`` overrides, dedicated command-line flags.
Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .encoder import EncoderConfig
from .errors import ConfigError
from .model import HiTransformerConfig, speaker_width
from .tokenizer import TokenizerConfig
from .training import FULL_SIZE_LEARNING_RATE, TrainConfig

DEFAULTS: dict[str, Any] = {
    "preset": "tiny",
    "variant": "base",
    "seed": 0,
    "labels": "friends4",
    "drop_out_of_set": False,
    "data": {"train": None, "val": None, "test": None},
    "vocab": None,
    "vocab_size": 8000,
    "min_freq": 1,
    "checkpoint": None,
    "out": None,
    "split": "test",
    "uwa_present_only": False,
    "tokenizer": {"max_len": 64, "lowercase": True},
    "lower": {"n_layers": 2, "n_heads": 4, "d_model": 32, "d_ff": 128, "attn_dropout": 0.1,
              "max_positions": 64, "positional_kind": "learned", "ln_eps": 1e-12},
    # upper d_model follows from lower d_model and the speaker width
    "upper": {"n_layers": 2, "n_heads": 8, "d_ff": None, "attn_dropout": 0.1,
              "max_positions": 512, "positional_kind": "sinusoidal", "ln_eps": 1e-12},
    "model": {"classifier_hidden": 300, "classifier_dropout": 0.5, "pool_specials": True,
              "init_std": 0.02, "s_max": None},
    "train": {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "epochs": 30,
              "freeze_lower": False, "log_base": "2", "target_train_accuracy": None, "min_epochs": 1},
    "gradcheck": {"eps": 3e-5, "samples": 200, "init_std": 0.15, "tolerance": 1e-5, "dialog": 0},
    "synth": {"kind": "all", "n_train": None, "n_val": None, "n_test": None},
}

PRESETS: dict[str, dict[str, Any]] = {
    "tiny": {},
    "paper": {
        "tokenizer": {"max_len": 512},
        "lower": {"n_layers": 12, "n_heads": 12, "d_model": 768, "d_ff": 3072, "max_positions": 512},
        "upper": {"n_layers": 4, "n_heads": 8},
        "train": {"learning_rate": FULL_SIZE_LEARNING_RATE},
    },
}

VARIANTS = ("base", "speaker")


def _merge(base: dict, update: Mapping, schema: Mapping, where: str = "") -> dict:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(schema[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[key], value, schema[key], path + ".")
        else:
            base[key] = value
    return base


def parse_set(item: str) -> dict:
    """``a.b=1`` -> ``{"a": {"b": 1}}``; values parse as JSON, else stay strings."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    return out


def resolve(config_path: str | Path | None = None, sets: Sequence[str] = (),
            flags: Mapping[str, Any] | None = None) -> dict:
    """Build and validate the full run config."""
    file_cfg: dict = {}
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
    overrides = [parse_set(s) for s in sets]
    flags = {k: v for k, v in (flags or {}).items() if v is not None}

    preset = flags.get("preset")
    for layer in reversed(overrides):
        if preset is None and "preset" in layer:
            preset = layer["preset"]
    preset = preset or file_cfg.get("preset", DEFAULTS["preset"])
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")

    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, PRESETS[preset], DEFAULTS)
    _merge(cfg, file_cfg, DEFAULTS)
    for layer in overrides:
        _merge(cfg, layer, DEFAULTS)
    _merge(cfg, flags, DEFAULTS)
    cfg["preset"] = preset
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    if cfg["split"] not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {cfg['split']!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    try:
        tokenizer_config(cfg)
        train_config(cfg)
        lower = EncoderConfig(**cfg["lower"])
        if lower.max_positions < cfg["tokenizer"]["max_len"]:
            raise ConfigError("lower.max_positions must cover tokenizer.max_len")
        upper_config(cfg, extra=0)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def tokenizer_config(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(**cfg["tokenizer"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def upper_config(cfg: dict, extra: int) -> EncoderConfig:
    up = dict(cfg["upper"])
    d_model = cfg["lower"]["d_model"] + extra
    if up["d_ff"] is None:
        up["d_ff"] = 4 * d_model
    return EncoderConfig(d_model=d_model, **up)


def model_config(cfg: dict, vocab_size: int, n_classes: int, corpus_s_max: int = 1) -> HiTransformerConfig:
    """Model config for a vocab/label set; the speaker width is padded for head divisibility."""
    speaker = cfg["variant"] == "speaker"
    lower = EncoderConfig(**cfg["lower"])
    m = cfg["model"]
    s_max = m["s_max"]
    if s_max is None:
        s_max = speaker_width(lower.d_model, corpus_s_max, cfg["upper"]["n_heads"]) if speaker else 1
    elif s_max < corpus_s_max:
        raise ConfigError(f"model.s_max {s_max} is below the corpus speaker count {corpus_s_max}")
    upper = upper_config(cfg, s_max if speaker else 0)
    return HiTransformerConfig(
        lower=lower, upper=upper, vocab_size=vocab_size, n_classes=n_classes,
        classifier_hidden=m["classifier_hidden"], classifier_dropout=m["classifier_dropout"],
        speaker_variant=speaker, s_max=s_max, pool_specials=m["pool_specials"], init_std=m["init_std"])
