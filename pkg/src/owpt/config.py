"""Flat key-value experiment configuration with dotted sections.

The format is deliberately plain: one ``section.key=value`` per line, ``#``
comments, no nesting.  Unknown keys are hard errors so silent typos cannot
change an experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .data import DatasetSpec

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainControls",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "config_text",
    "config_hash",
    "VALID_METHODS",
]

VALID_METHODS = ("zs", "prompt-ens", "coop", "dept", "decoop")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    """Frozen-encoder and zero-shot baseline settings."""

    token_dim: int = 16
    embed_dim: int = 32
    temperature: float = 0.05
    zs_ensemble: int = 4
    text_gain: float = 1.2
    token_noise: float = 0.6
    zs_prompt_scale: float = 0.02

    def __post_init__(self):
        if self.token_dim < 1 or self.embed_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.zs_ensemble < 1:
            raise ValueError("zs_ensemble must be >= 1")
        if self.token_noise < 0 or self.zs_prompt_scale < 0:
            raise ValueError("noise scales must be nonnegative")


@dataclass(frozen=True)
class TrainControls:
    """Optimizer settings shared across trainers; epochs differ per role."""

    lr: float = 0.002
    batch_size: int = 32
    detector_epochs: int = 50
    classifier_epochs: int = 100
    gamma: float = 0.4
    prompt_len: int = 16

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if min(self.batch_size, self.detector_epochs, self.classifier_epochs) < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    model: ModelConfig = ModelConfig()
    train: TrainControls = TrainControls()
    methods: tuple[str, ...] = VALID_METHODS
    n_detectors: int = 3
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods must be nonempty")
        for m in self.methods:
            if m not in VALID_METHODS:
                raise ValueError(f"unknown method {m!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.n_detectors < 2:
            raise ValueError("n_detectors must be >= 2")


# key -> (section attribute, field name, parser); dataset.seed is
# deliberately absent: the per-run seed comes from `seeds`.
_DATASET_KEYS = {
    "dataset.C": ("dataset", "n_classes", int),
    "dataset.d_feat": ("dataset", "feature_dim", int),
    "dataset.noise_sigma": ("dataset", "noise_sigma", float),
    "dataset.min_separation": ("dataset", "min_separation", float),
    "dataset.shots_per_class": ("dataset", "shots_per_class", int),
    "dataset.test_per_class": ("dataset", "test_per_class", int),
    "dataset.mixing_ratio": ("dataset", "mixing_ratio", float),
    "dataset.base_fraction": ("dataset", "base_fraction", float),
}
_MODEL_KEYS = {
    "model.token_dim": ("model", "token_dim", int),
    "model.embed_dim": ("model", "embed_dim", int),
    "model.temperature": ("model", "temperature", float),
    "model.zs_ensemble": ("model", "zs_ensemble", int),
    "model.text_gain": ("model", "text_gain", float),
    "model.token_noise": ("model", "token_noise", float),
    "model.zs_prompt_scale": ("model", "zs_prompt_scale", float),
}
_TRAIN_KEYS = {
    "train.lr": ("train", "lr", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.detector_epochs": ("train", "detector_epochs", int),
    "train.classifier_epochs": ("train", "classifier_epochs", int),
    "train.gamma": ("train", "gamma", float),
    "train.prompt_len": ("train", "prompt_len", int),
}
_SECTION_KEYS = {**_DATASET_KEYS, **_MODEL_KEYS, **_TRAIN_KEYS}


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.split(",") if p.strip())


def parse_config_text(text: str) -> ExperimentConfig:
    sections = {"dataset": {}, "model": {}, "train": {}}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(key, f"line {lineno}: expected key=value, got {line!r}")
        try:
            if key in _SECTION_KEYS:
                section, name, cast = _SECTION_KEYS[key]
                sections[section][name] = cast(raw)
            elif key == "methods":
                top["methods"] = tuple(m.strip() for m in raw.split(",") if m.strip())
            elif key == "K":
                top["n_detectors"] = int(raw)
            elif key == "seeds":
                top["seeds"] = _parse_ints(raw)
            elif key == "output_dir":
                top["output_dir"] = raw
            else:
                raise ConfigError(key, f"unknown config key: {key}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(key, f"bad value for {key}: {raw!r} ({exc})") from None
    try:
        return ExperimentConfig(
            dataset=DatasetSpec(**sections["dataset"]),
            model=ModelConfig(**sections["model"]),
            train=TrainControls(**sections["train"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigError("<config>", str(exc)) from None


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical snapshot in the same key=value format (stable key order)."""
    lines = []
    for key, (section, name, cast) in _SECTION_KEYS.items():
        v = getattr(getattr(cfg, section), name)
        lines.append(f"{key}={v!r}" if cast is float else f"{key}={v}")
    lines.append("methods=" + ",".join(cfg.methods))
    lines.append(f"K={cfg.n_detectors}")
    lines.append("seeds=" + ",".join(str(s) for s in cfg.seeds))
    lines.append(f"output_dir={cfg.output_dir}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:8]
