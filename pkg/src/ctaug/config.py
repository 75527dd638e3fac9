"""Experiment configuration: one JSON file, dotted ``--set`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .finetune import BACKBONES, REPORTED_HYPERPARAMS


@dataclass
class SplitConfig:
    ratios: list[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    seed: int = 0


@dataclass
class GaussianConfig:
    sigma: float = 1.0
    kernel_radius: int = 2


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    zoom_range: list[float] = field(default_factory=lambda: [1.0, 1.1])
    warp_magnitude: float = 0.2
    lighting_range: list[float] = field(default_factory=lambda: [0.8, 1.2])


@dataclass
class PreprocessConfig:
    gaussian: GaussianConfig = field(default_factory=GaussianConfig)
    presize_dim: int = 256
    final_dim: int = 224
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class LossWeightsConfig:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0


@dataclass
class CycleGanConfig:
    enabled: bool = True
    weights: LossWeightsConfig = field(default_factory=LossWeightsConfig)
    epochs: int = 100
    steps: int | None = None  # overrides epochs when set
    ratio: float = 1.0
    checkpoint: str | None = None  # default <cache>/cyclegan/cyclegan.ckpt
    input_dim: int = 256
    base_width: int = 64
    n_res_blocks: int | None = None
    batch_size: int = 1
    learning_rate: float = 2e-4
    buffer_capacity: int = 50
    seed: int = 0


@dataclass
class BackboneConfig:
    id: str = "resnet50"
    batch_size: int | None = None
    learning_rate: float | None = None
    pretrained: bool = True
    weights_path: str | None = None

    def __post_init__(self):
        if self.id not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.id!r}; choose from {sorted(BACKBONES)}")
        batch, lr = REPORTED_HYPERPARAMS[self.id]
        if self.batch_size is None:
            self.batch_size = batch
        if self.learning_rate is None:
            self.learning_rate = lr


@dataclass
class TrainingConfig:
    stage1_epochs: int = 1
    stage2_max_epochs: int = 50
    patience: int = 5
    metric: str = "val_loss"
    n_runs: int = 10
    seed: int = 0
    confidence: float = 0.95
    conditions: list[str] = field(default_factory=lambda: ["without", "with"])
    deterministic: bool = False
    num_workers: int = 0
    device: str = "cpu"  # "cpu", "cuda", "cuda:N" or "auto"


@dataclass
class ExperimentConfig:
    manifest_path: str = "manifest.csv"
    cache_dir: str = "cache"
    report_dir: str = "reports"
    split: SplitConfig = field(default_factory=SplitConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cyclegan: CycleGanConfig = field(default_factory=CycleGanConfig)
    backbones: list[BackboneConfig] = field(default_factory=lambda: [BackboneConfig()])
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if check_paths and not Path(self.manifest_path).is_file():
            raise ConfigError(f"manifest_path does not exist: {self.manifest_path}")
        if self.training.n_runs < 1:
            raise ConfigError("training.n_runs must be >= 1")
        if not set(self.training.conditions) <= {"with", "without"} or not self.training.conditions:
            raise ConfigError(f"training.conditions must be a subset of ['without', 'with']: {self.training.conditions}")
        if "with" in self.training.conditions and not self.cyclegan.enabled:
            raise ConfigError("training.conditions includes 'with' but cyclegan.enabled is false")
        dev = self.training.device
        if not (dev in ("cpu", "cuda", "auto") or (dev.startswith("cuda:") and dev[5:].isdigit())):
            raise ConfigError(f"training.device must be cpu, cuda, cuda:N or auto, got {dev!r}")
        if self.preprocess.final_dim > self.preprocess.presize_dim:
            raise ConfigError("preprocess.final_dim must not exceed presize_dim")
        if not self.backbones:
            raise ConfigError("at least one backbone is required")
        for b in self.backbones:
            if b.weights_path is not None and check_paths and not Path(b.weights_path).is_file():
                raise ConfigError(f"backbone weights_path does not exist: {b.weights_path}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{where}.{name}" if where else name
        ftype = _FIELD_TYPES.get((cls, name))
        if ftype is not None and isinstance(value, list) and name == "backbones":
            kwargs[name] = [_build(ftype, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif ftype is not None:
            kwargs[name] = _build(ftype, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_FIELD_TYPES = {
    (ExperimentConfig, "split"): SplitConfig,
    (ExperimentConfig, "preprocess"): PreprocessConfig,
    (ExperimentConfig, "cyclegan"): CycleGanConfig,
    (ExperimentConfig, "backbones"): BackboneConfig,
    (ExperimentConfig, "training"): TrainingConfig,
    (PreprocessConfig, "gaussian"): GaussianConfig,
    (PreprocessConfig, "augment"): AugmentConfig,
    (CycleGanConfig, "weights"): LossWeightsConfig,
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; list elements are addressed by index."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node: Any = data
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index {part!r} in override {key!r}") from None
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = _parse_value(raw)
        except (ValueError, IndexError):
            raise ConfigError(f"bad list index {last!r} in override {key!r}") from None
    elif isinstance(node, dict):
        node[last] = _parse_value(raw)
    else:
        raise ConfigError(f"cannot set {key!r}: parent is not an object")


def load_config(path: str | os.PathLike | None, overrides=(), check_paths: bool = True) -> ExperimentConfig:
    """Read the JSON config, apply overrides and ``CTAUG_CACHE``, resolve paths.

    Relative paths are taken relative to the config file's directory.
    """
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        base = path.resolve().parent
    for item in overrides:
        apply_override(data, item)
    if os.environ.get("CTAUG_CACHE"):
        data["cache_dir"] = os.environ["CTAUG_CACHE"]
    cfg = _build(ExperimentConfig, data, "")
    for attr in ("manifest_path", "cache_dir", "report_dir"):
        setattr(cfg, attr, str((base / getattr(cfg, attr)).resolve()))
    if cfg.cyclegan.checkpoint is not None:
        cfg.cyclegan.checkpoint = str((base / cfg.cyclegan.checkpoint).resolve())
    for b in cfg.backbones:
        if b.weights_path is not None:
            b.weights_path = str((base / b.weights_path).resolve())
    return cfg.validate(check_paths)


def digest(*parts: Any) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
