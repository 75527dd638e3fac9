"""Cross-class synthetic slices from a trained CycleGAN."""

from __future__ import annotations

import hashlib
import math
import os
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from ..data_catalog import Label, Partition, SliceRecord, Source, SplitAssignment
from ..errors import DataError
from ..preprocess import load_image, resize_bilinear, save_image
from .model import CycleGanModel, translate

# normal is domain A, covid is domain B
DIRECTION_FOR = {Label.NORMAL: "a_to_b", Label.COVID: "b_to_a"}


def to_gan_range(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def from_gan_range(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def load_gan_batch(paths: Sequence[str], dim: int, channels: int, resize: bool = True) -> torch.Tensor:
    """Stack images as an (N, C, dim, dim) float tensor scaled to [-1, 1]."""
    out = []
    for p in paths:
        img = load_image(p)
        if img.shape != (dim, dim):
            if not resize:
                raise DataError(f"{p}: image is {img.shape[0]}x{img.shape[1]}, model expects {dim}x{dim}")
            img = resize_bilinear(img, dim, dim)
        out.append(np.broadcast_to(to_gan_range(img), (channels, dim, dim)))
    return torch.from_numpy(np.stack(out).astype(np.float32))


def _output_path(cache_dir: Path, direction: str, source: str, taken: set) -> Path:
    stem = Path(source).stem
    target = cache_dir / "generated" / direction / f"{stem}.png"
    if target in taken:
        digest = hashlib.sha256(os.path.abspath(source).encode()).hexdigest()[:8]
        target = target.with_name(f"{stem}-{digest}.png")
    taken.add(target)
    return target


def generation_counts(n_covid: int, n_normal: int, ratio: float) -> tuple[int, int]:
    """(generated covid, generated normal) for a train set of the given class sizes.

    Covid outputs come from translated normal slices and vice versa.
    """
    return math.ceil(ratio * n_normal - 1e-9), math.ceil(ratio * n_covid - 1e-9)


def generate_augmented_set(model: CycleGanModel, train_records: Sequence[SliceRecord], ratio: float,
                           cache_dir: str | os.PathLike, seed: int = 0, batch_size: int = 8,
                           assignment: SplitAssignment | None = None, resize: bool = True,
                           names: Mapping[str, str] | None = None) -> list[SliceRecord]:
    """Translate ceil(ratio * N_c) random slices of each class into the other class.

    Outputs are written to ``<cache>/generated/<direction>/<stem>.png`` and
    returned as generated records that keep the source patient id. ``names``
    maps a record's slice_path to the path whose stem names the output (used
    when records point into the filtered cache).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    originals = [r for r in train_records if r.source is Source.ORIGINAL]
    if assignment is not None:
        for rec in originals:
            if assignment.partition_of.get(rec.patient_id) is not Partition.TRAIN:
                raise DataError(f"record {rec.slice_path!r} is not in the train partition")
    if ratio == 0.0:
        return []
    cache_dir = Path(cache_dir)
    try:
        for direction in DIRECTION_FOR.values():
            (cache_dir / "generated" / direction).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write generated images under {cache_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    spec = model.gen_spec
    taken: set = set()
    generated = []
    for label in (Label.COVID, Label.NORMAL):
        pool = [r for r in originals if r.label is label]
        n = math.ceil(ratio * len(pool) - 1e-9)
        if n == 0:
            continue
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False))]
        direction = DIRECTION_FOR[label]
        for start in range(0, n, batch_size):
            chunk = chosen[start:start + batch_size]
            batch = load_gan_batch([r.slice_path for r in chunk], spec.input_dim, spec.channels, resize)
            fakes = translate(model, batch, direction).numpy().astype(np.float64)
            for rec, fake in zip(chunk, fakes):
                source_name = names.get(rec.slice_path, rec.slice_path) if names else rec.slice_path
                target = _output_path(cache_dir, direction, source_name, taken)
                try:
                    save_image(from_gan_range(fake), target)
                except OSError as exc:
                    raise DataError(f"cannot write {target}: {exc}") from exc
                generated.append(SliceRecord(rec.patient_id, str(target), label.other, Source.GENERATED))
    return generated
