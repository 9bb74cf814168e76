"""Flat key=value run configuration shared by the CLI commands.

One file configures the model, routing module, trainer, and dataset geometry.
Unknown keys fail loudly with the full list of valid keys so config typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

from .decoder import DecoderConfig
from .routing import RoutingConfig
from .synthdata import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default); defaults mirror the dataclass defaults
CONFIG_KEYS = {
    # decoder
    "layers": (int, 3),
    "heads": (int, 4),
    "width": (int, 64),
    "queries": (int, 20),
    "classes": (int, 3),
    "ffn_width": (int, 128),
    "encoder_layers": (int, 0),
    # routing
    "d_z": (int, 16),
    "rank": (int, 16),
    "gate_rank": (int, 32),
    "descriptor_eps": (float, 1e-7),
    # trainer
    "steps": (int, 2000),
    "warmup_frac": (float, 0.5),
    "alpha_min": (float, 0.0),
    "alpha_max": (float, 1.0),
    "lr": (float, 2e-4),
    "weight_decay": (float, 1e-4),
    "batch_size": (int, 8),
    "lr_drop_frac": (float, 0.9),
    "eval_interval": (int, 200),
    "lambda_cls": (float, 2.0),
    "lambda_l1": (float, 5.0),
    "lambda_giou": (float, 2.0),
    "background_weight": (float, 0.1),
    # dataset geometry
    "image_size": (int, 64),
    "patch": (int, 8),
    "min_objects": (int, 1),
    "max_objects": (int, 5),
    "min_side": (float, 0.125),
    "max_side": (float, 0.5),
    "max_overlap": (float, 0.3),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """key=value lines -> fully-populated {key: typed value}; '#' comments and
    blank lines are ignored."""
    values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{ln}: unknown key '{key}'; valid keys: "
                              + ", ".join(sorted(CONFIG_KEYS)))
        typ = CONFIG_KEYS[key][0]
        try:
            values[key] = typ(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{ln}: key '{key}' needs a "
                              f"{typ.__name__} value, got {val!r}") from exc
    return values


def parse_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def default_config() -> dict:
    return {k: d for k, (_, d) in CONFIG_KEYS.items()}


def decoder_config(values: dict) -> DecoderConfig:
    return DecoderConfig(layers=values["layers"], heads=values["heads"],
                         width=values["width"], queries=values["queries"],
                         classes=values["classes"],
                         ffn_width=values["ffn_width"],
                         encoder_layers=values["encoder_layers"])


def routing_config(values: dict) -> RoutingConfig:
    return RoutingConfig(d_z=values["d_z"], r=values["rank"],
                         r_g=values["gate_rank"],
                         descriptor_eps=values["descriptor_eps"])


def scene_spec(values: dict, seed: int = 0) -> SceneSpec:
    return SceneSpec(image_size=values["image_size"], patch=values["patch"],
                     classes=values["classes"],
                     min_objects=values["min_objects"],
                     max_objects=values["max_objects"],
                     min_side=values["min_side"], max_side=values["max_side"],
                     max_overlap=values["max_overlap"], seed=seed)


def train_config(values: dict, seed: int = 0) -> TrainConfig:
    return TrainConfig(steps=values["steps"],
                       warmup_frac=values["warmup_frac"],
                       alpha_min=values["alpha_min"],
                       alpha_max=values["alpha_max"], lr=values["lr"],
                       weight_decay=values["weight_decay"],
                       batch_size=values["batch_size"], seed=seed,
                       lr_drop_frac=values["lr_drop_frac"],
                       eval_interval=values["eval_interval"],
                       lam=(values["lambda_cls"], values["lambda_l1"],
                            values["lambda_giou"]),
                       background_weight=values["background_weight"])
