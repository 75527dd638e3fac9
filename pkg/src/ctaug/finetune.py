"""Two-stage fine-tuning of pretrained timm backbones with early stopping."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .data_catalog import Label, SliceRecord
from .errors import ConfigError, DataError, TrainingError
from .preprocess import AugmentPolicy, augment, load_image, presize_and_crop, to_model_tensor

BACKBONES = {
    "densenet121": "densenet121",
    "efficientnet_b3": "efficientnet_b3",
    "resnet50": "resnet50",
    "resnest50": "resnest50d",
    "vit": "vit_base_patch16_224",
}

# batch size / learning rate selected per network
REPORTED_HYPERPARAMS = {
    "densenet121": (16, 1e-3),
    "efficientnet_b3": (16, 1e-3),
    "resnet50": (16, 1e-3),
    "resnest50": (16, 1e-4),
    "vit": (16, 1e-5),
}

VIT_PATCH = 16
CLASS_NAMES = (Label.NORMAL, Label.COVID)  # logit index -> label
CHECKPOINT_HEADER = b"CLF-CKPT-v1\n"

Metric = Literal["val_loss", "val_accuracy"]


def label_index(label: Label) -> int:
    return CLASS_NAMES.index(Label(label))


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    pretrained: bool = True
    input_dim: int = 224
    weights_path: str | None = None  # local copy of the provider weights

    def __post_init__(self):
        if self.id not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.id!r}; choose from {sorted(BACKBONES)}")
        if self.id == "vit" and self.input_dim % VIT_PATCH:
            raise ConfigError(f"vit needs input_dim divisible by {VIT_PATCH}, got {self.input_dim}")

    @property
    def timm_name(self) -> str:
        return BACKBONES[self.id]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    stage1_epochs: int = 1
    stage2_max_epochs: int = 50
    early_stop_patience: int = 5
    early_stop_metric: Metric = "val_loss"
    seed: int = 0
    use_cyclegan_aug: bool = False
    aug_ratio: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.stage1_epochs < 0 or self.stage2_max_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.early_stop_metric not in ("val_loss", "val_accuracy"):
            raise ConfigError(f"unknown early_stop_metric {self.early_stop_metric!r}")

    @classmethod
    def for_backbone(cls, backbone_id: str, **overrides) -> "TrainConfig":
        batch, lr = REPORTED_HYPERPARAMS[backbone_id]
        return cls(**{"batch_size": batch, "learning_rate": lr, **overrides})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    stage: int = 1


@dataclass
class LearningCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpochRecord) -> None:
        if rec.epoch != len(self.records):
            raise ValueError(f"expected epoch {len(self.records)}, got {rec.epoch}")
        values = (rec.train_loss, rec.val_loss, rec.val_accuracy)
        if not all(math.isfinite(v) for v in values):
            raise TrainingError(f"non-finite learning-curve values at epoch {rec.epoch}: {values}")
        self.records.append(rec)

    def values(self, metric: Metric) -> list[float]:
        return [getattr(r, metric) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy)])

    @classmethod
    def from_values(cls, val_losses: Sequence[float], val_accuracies: Sequence[float] | None = None) -> "LearningCurve":
        accs = val_accuracies if val_accuracies is not None else [0.0] * len(val_losses)
        curve = cls()
        for i, (loss, acc) in enumerate(zip(val_losses, accs)):
            curve.append(EpochRecord(i, loss, loss, acc))
        return curve


@dataclass
class TrainRun:
    config: TrainConfig
    backbone: BackboneSpec
    curve: LearningCurve
    best_epoch: int
    final_weights: dict


# -- model construction -------------------------------------------------------

def build_classifier(spec: BackboneSpec, n_classes: int = 2) -> nn.Module:
    """timm backbone with a freshly initialised ``n_classes`` head.

    Weights come from the provider when ``spec.pretrained``; ``weights_path``
    points the provider at a local copy instead of the network.
    """
    import timm

    kwargs = {"num_classes": n_classes}
    if spec.id == "vit":
        kwargs["img_size"] = spec.input_dim
    pretrained = spec.pretrained or spec.weights_path is not None
    if spec.weights_path is not None:
        if not os.path.isfile(spec.weights_path):
            raise DataError(f"backbone weights not found: {spec.weights_path}")
        kwargs["pretrained_cfg_overlay"] = {"file": str(spec.weights_path)}
    try:
        model = timm.create_model(spec.timm_name, pretrained=pretrained, **kwargs)
    except (OSError, RuntimeError, ValueError) as exc:
        raise DataError(f"pretrained weights for {spec.id!r} unavailable: {exc}") from exc
    model.backbone_spec = spec
    return model


def head_parameters(model: nn.Module) -> list[nn.Parameter]:
    return list(model.get_classifier().parameters())


def body_parameters(model: nn.Module) -> list[nn.Parameter]:
    head = {id(p) for p in head_parameters(model)}
    return [p for p in model.parameters() if id(p) not in head]


def set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


# -- data ---------------------------------------------------------------------

class SliceDataset(Dataset):
    """Records -> (3, D, D) standardized tensors with integer labels.

    Training mode draws a random crop and augmentation from a generator
    seeded by (seed, epoch, index) so runs replay exactly.
    """

    def __init__(self, records: Sequence[SliceRecord], policy: AugmentPolicy, train: bool, seed: int = 0):
        self.records = list(records)
        self.policy = policy
        self.train = train
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        rec = self.records[i]
        img = load_image(rec.slice_path)
        if self.train:
            rng = np.random.default_rng([self.seed, self.epoch, i])
            img = augment(presize_and_crop(img, self.policy, rng), self.policy, rng)
        else:
            img = presize_and_crop(img, self.policy)
        x = torch.from_numpy(to_model_tensor(img).astype(np.float32))
        return x, label_index(rec.label)


def make_loader(records, policy: AugmentPolicy, train: bool, batch_size: int, seed: int = 0,
                num_workers: int = 0) -> DataLoader:
    ds = SliceDataset(records, policy, train, seed)
    gen = torch.Generator().manual_seed(seed)
    return DataLoader(ds, batch_size=batch_size, shuffle=train, generator=gen, num_workers=num_workers)


# -- training -----------------------------------------------------------------

def early_stop_check(curve: LearningCurve | Sequence[float], patience: int,
                     metric: Metric = "val_loss") -> tuple[str, int]:
    """``("stop", best)`` once the best epoch lies more than ``patience`` epochs back."""
    values = list(curve) if not isinstance(curve, LearningCurve) else curve.values(metric)
    if not values:
        raise ValueError("early_stop_check needs a non-empty curve")
    arr = np.asarray(values, dtype=np.float64)
    best = int(np.argmin(arr) if metric == "val_loss" else np.argmax(arr))
    last = len(arr) - 1
    return ("stop" if last - best > patience else "continue"), best


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _device(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def _run_epoch(model, loader, optimizer, epoch: int) -> float:
    model.train()
    device = _device(model)
    if isinstance(loader.dataset, SliceDataset):
        loader.dataset.set_epoch(epoch)
    total, count = 0.0, 0
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        optimizer.zero_grad(set_to_none=True)
        loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        optimizer.step()
        total += float(loss.detach()) * len(y)
        count += len(y)
    return total / count


@torch.no_grad()
def _validate(model, loader) -> tuple[float, float]:
    model.eval()
    device = _device(model)
    total, correct, count = 0.0, 0, 0
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        logits = model(x)
        total += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(dim=1) == y).sum())
        count += len(y)
    if count == 0:
        raise DataError("empty validation stream")
    return total / count, correct / count


def two_stage_finetune(model: nn.Module, train_loader: DataLoader, val_loader: DataLoader, cfg: TrainConfig,
                       on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainRun:
    """Stage 1 trains the new head on a frozen body; stage 2 unfreezes
    everything with the body at a tenth of the head's rate, stops early on
    ``cfg.early_stop_metric`` and restores the best epoch's weights."""
    if len(train_loader.dataset) == 0:
        raise DataError("empty training stream")
    torch.manual_seed(cfg.seed)
    head, body = head_parameters(model), body_parameters(model)
    curve = LearningCurve()
    best_state, best_epoch = None, -1

    def finish_epoch(stage: int, train_loss: float) -> str:
        nonlocal best_state, best_epoch
        val_loss, val_acc = _validate(model, val_loader)
        rec = EpochRecord(len(curve), train_loss, val_loss, val_acc, stage)
        curve.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        decision, best = early_stop_check(curve, cfg.early_stop_patience, cfg.early_stop_metric)
        if best != best_epoch:
            best_epoch, best_state = best, copy.deepcopy(model.state_dict())
        return decision

    set_trainable(body, False)
    set_trainable(head, True)
    opt = torch.optim.Adam(head, lr=cfg.learning_rate)
    for _ in range(cfg.stage1_epochs):
        finish_epoch(1, _run_epoch(model, train_loader, opt, len(curve)))

    set_trainable(body, True)
    opt = torch.optim.Adam([
        {"params": body, "lr": cfg.learning_rate / 10},
        {"params": head, "lr": cfg.learning_rate},
    ])
    for _ in range(cfg.stage2_max_epochs):
        if finish_epoch(2, _run_epoch(model, train_loader, opt, len(curve))) == "stop":
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    spec = getattr(model, "backbone_spec", None)
    return TrainRun(cfg, spec, curve, best_epoch, model.state_dict())


# -- inference ----------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@torch.no_grad()
def predict_probs(model: nn.Module, imgs: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    """(N, 2) softmax probabilities, columns ordered as ``CLASS_NAMES``."""
    if imgs.ndim != 4 or imgs.shape[1] != 3:
        raise DataError(f"expected (N, 3, H, W) images, got {tuple(imgs.shape)}")
    spec = getattr(model, "backbone_spec", None)
    if spec is not None and spec.id == "vit" and tuple(imgs.shape[2:]) != (spec.input_dim, spec.input_dim):
        raise DataError(f"vit expects {spec.input_dim}x{spec.input_dim} inputs, got {tuple(imgs.shape[2:])}")
    was_training = model.training
    model.eval()
    try:
        device = _device(model)
        logits = [model(imgs[i:i + batch_size].to(device)).double().cpu().numpy()
                  for i in range(0, len(imgs), batch_size)]
    finally:
        model.train(was_training)
    if not logits:
        return np.zeros((0, 2))
    return softmax(np.concatenate(logits))


@torch.no_grad()
def predict_loader(model: nn.Module, loader: DataLoader) -> np.ndarray:
    return np.concatenate([predict_probs(model, x) for x, _ in loader]) if len(loader.dataset) else np.zeros((0, 2))


# -- checkpoints --------------------------------------------------------------

def save_classifier(model: nn.Module, path, best_epoch: int, config_hash: str) -> None:
    spec: BackboneSpec = model.backbone_spec
    payload = {"backbone": asdict(spec), "state_dict": model.state_dict(),
               "best_epoch": int(best_epoch), "config_hash": config_hash}
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_HEADER + buf.getvalue())


def load_classifier(path) -> tuple[nn.Module, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_HEADER):
        raise DataError(f"{path}: not a CLF-CKPT-v1 checkpoint")
    payload = torch.load(io.BytesIO(blob[len(CHECKPOINT_HEADER):]), map_location="cpu", weights_only=True)
    spec = BackboneSpec(**{**payload["backbone"], "pretrained": False, "weights_path": None})
    model = build_classifier(spec)
    model.load_state_dict(payload["state_dict"])
    model.backbone_spec = BackboneSpec(**payload["backbone"])
    return model, payload
