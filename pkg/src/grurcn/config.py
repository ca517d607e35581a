"""Flat key-value experiment configuration with dotted section names.

Format: one ``section.key=value`` per line; ``#`` starts a comment; blank
lines are ignored.  Lists are comma-separated.  Example::

    seed=7
    dataset.boundary=wrap
    model.architecture=gru_rcn
    model.hidden_widths=16,24,32
    train.epochs=10
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import EvalProtocol, SynthSpec
from .model import ModelConfig, ARCHITECTURES
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def parse_flat(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"duplicate key '{key}'")
        values[key] = value.strip()
    return values


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, float, str):
            return kind(raw)
        if isinstance(kind, tuple):  # (tuple, element_type)
            elem = kind[1]
            return tuple(elem(part.strip()) for part in raw.split(",") if part.strip())
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"key '{key}': cannot parse {raw!r} as {getattr(kind, '__name__', kind)}")


_SCHEMA = {
    "seed": int,
    "out": str,
    "dataset.path": str,
    "dataset.canvas": int,
    "dataset.channels": int,
    "dataset.frames": int,
    "dataset.sprites": (tuple, str),
    "dataset.sprite_sizes": (tuple, int),
    "dataset.speeds": (tuple, float),
    "dataset.noise": float,
    "dataset.confound": bool,
    "dataset.boundary": str,
    "dataset.train": int,
    "dataset.val": int,
    "dataset.test": int,
    "backbone.input": (tuple, int),
    "backbone.channels": (tuple, int),
    "backbone.pools": (tuple, int),
    "backbone.kernel_size": int,
    "backbone.freeze": bool,
    "model.architecture": str,
    "model.hidden_widths": (tuple, int),
    "model.kernel_size": int,
    "model.dropout": float,
    "model.stream": str,
    "train.epochs": int,
    "train.batch_size": int,
    "train.alpha": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.eps": float,
    "train.patience": int,
    "train.t_crop": int,
    "train.crop_ladder": (tuple, int),
    "eval.subvolumes": int,
    "eval.views": str,
    "eval.flips": bool,
    "compare.architectures": (tuple, str),
    "fusion.enabled": bool,
    "fusion.stream": str,
    "fusion.weight_appearance": float,
    "fusion.weight_motion": float,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    dataset_path: str | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    split_counts: dict = field(default_factory=lambda: {"train": 800, "val": 100, "test": 200})
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    freeze_backbone: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    compare_architectures: tuple = ()
    fusion_enabled: bool = False
    fusion_stream: str = "framediff"
    fusion_weights: tuple = (1.0, 2.0)


def load_config(path) -> ExperimentConfig:
    return config_from_values(parse_flat(Path(path).read_text()))


def config_from_values(raw: dict[str, str]) -> ExperimentConfig:
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key '{key}'")
    vals = {key: _convert(key, raw[key], kind)
            for key, kind in _SCHEMA.items() if key in raw}

    def get(key, default):
        return vals.get(key, default)

    try:
        synth = SynthSpec(
            canvas=get("dataset.canvas", 40),
            channels=get("dataset.channels", 1),
            frames=get("dataset.frames", 16),
            sprite_kinds=get("dataset.sprites", ("square", "circle", "plus")),
            sprite_sizes=get("dataset.sprite_sizes", (7, 9, 11)),
            speeds=get("dataset.speeds", (1.0, 2.0)),
            noise_amplitude=get("dataset.noise", 0.0),
            appearance_confound=get("dataset.confound", True),
            boundary=get("dataset.boundary", "bounce"),
        )
    except ValueError as exc:
        raise ConfigError(f"dataset.*: {exc}") from exc

    channels = get("dataset.channels", 1)
    try:
        backbone = BackboneConfig(
            input_shape=tuple(get("backbone.input", (channels, 32, 32))),
            channels=get("backbone.channels", (16, 32, 64)),
            pool_factors=get("backbone.pools", (2, 2, 2)),
            kernel_size=get("backbone.kernel_size", 3),
        )
    except ValueError as exc:
        raise ConfigError(f"backbone.*: {exc}") from exc

    arch = get("model.architecture", "gru_rcn")
    if arch not in ARCHITECTURES:
        raise ConfigError(f"key 'model.architecture': unknown architecture {arch!r}")
    default_widths = ((64,) if arch == "fc_gru_baseline"
                      else tuple(16 * 2 ** i for i in range(backbone.num_levels)))
    try:
        model = ModelConfig(
            architecture=arch,
            hidden_widths=get("model.hidden_widths", default_widths),
            kernel_size=get("model.kernel_size", 3),
            dropout_rate=get("model.dropout", 0.7),
            class_count=synth.class_count,
            stream=get("model.stream", "rgb"),
        )
    except ValueError as exc:
        raise ConfigError(f"model.*: {exc}") from exc

    try:
        train = TrainConfig(
            epochs=get("train.epochs", 10),
            batch_size=get("train.batch_size", 16),
            alpha=get("train.alpha", 1e-3),
            beta1=get("train.beta1", 0.9),
            beta2=get("train.beta2", 0.999),
            eps=get("train.eps", 1e-8),
            patience=get("train.patience", 10),
            t_crop=get("train.t_crop", 10),
            crop_ladder=get("train.crop_ladder", (32, 28, 24, 21)),
        )
    except ValueError as exc:
        raise ConfigError(f"train.*: {exc}") from exc
    if train.epochs < 0 or train.batch_size < 1 or train.patience < 0:
        raise ConfigError("train.*: epochs/patience must be >= 0 and batch_size >= 1")

    views = get("eval.views", "corners_center")
    if views not in ("corners_center", "center"):
        raise ConfigError(f"key 'eval.views': unknown view set {views!r}")
    protocol = EvalProtocol(
        subvolumes=get("eval.subvolumes", 5),
        t_crop=train.t_crop,
        views=views,
        include_flips=get("eval.flips", True),
    )

    compare = get("compare.architectures", ())
    for a in compare:
        if a not in ARCHITECTURES:
            raise ConfigError(f"key 'compare.architectures': unknown architecture {a!r}")

    fusion_stream = get("fusion.stream", "framediff")
    if fusion_stream != "framediff":
        raise ConfigError("key 'fusion.stream': only 'framediff' is available")

    if "seed" not in vals:
        raise ConfigError("key 'seed' is required (no wall-clock default)")

    return ExperimentConfig(
        seed=vals["seed"],
        out=get("out", None),
        dataset_path=get("dataset.path", None),
        synth=synth,
        split_counts={"train": get("dataset.train", 800),
                      "val": get("dataset.val", 100),
                      "test": get("dataset.test", 200)},
        backbone=backbone,
        freeze_backbone=get("backbone.freeze", False),
        model=model,
        train=train,
        protocol=protocol,
        compare_architectures=compare,
        fusion_enabled=get("fusion.enabled", False),
        fusion_stream=fusion_stream,
        fusion_weights=(get("fusion.weight_appearance", 1.0),
                        get("fusion.weight_motion", 2.0)),
    )
