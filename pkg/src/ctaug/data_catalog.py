"""Slice manifests and patient-disjoint train/val/test splitting."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError


class Label(str, Enum):
    COVID = "covid"
    NORMAL = "normal"

    @property
    def other(self) -> "Label":
        return Label.NORMAL if self is Label.COVID else Label.COVID


class Source(str, Enum):
    ORIGINAL = "original"
    GENERATED = "generated"


class Partition(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


MANIFEST_COLUMNS = ("patient_id", "slice_path", "label")
AUGMENTED_COLUMNS = MANIFEST_COLUMNS + ("source",)


@dataclass(frozen=True)
class SliceRecord:
    patient_id: str
    slice_path: str
    label: Label
    source: Source = Source.ORIGINAL

    def __post_init__(self):
        if type(self.label) is not Label:
            object.__setattr__(self, "label", Label(self.label))
        if type(self.source) is not Source:
            object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SliceRecord, ...]
    patients: Mapping[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        seen: set[str] = set()
        patients: dict[str, list[int]] = {}
        for i, rec in enumerate(records):
            if rec.slice_path in seen:
                raise DataError(f"duplicate slice_path {rec.slice_path!r} (record {i})")
            seen.add(rec.slice_path)
            patients.setdefault(rec.patient_id, []).append(i)
        object.__setattr__(self, "patients", {k: tuple(v) for k, v in patients.items()})

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SplitAssignment:
    partition_of: Mapping[str, Partition]
    ratios: tuple[float, float, float]
    seed: int

    def to_json(self) -> str:
        payload = {
            "seed": int(self.seed),
            "ratios": [float(r) for r in self.ratios],
            "partition_of": {k: Partition(v).value for k, v in sorted(self.partition_of.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        try:
            payload = json.loads(text)
            return cls(
                partition_of={k: Partition(v) for k, v in payload["partition_of"].items()},
                ratios=tuple(float(r) for r in payload["ratios"]),
                seed=int(payload["seed"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed split file: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitAssignment":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def patients_in(self, part: Partition) -> list[str]:
        part = Partition(part)
        return sorted(p for p, v in self.partition_of.items() if v is part)


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Read a manifest CSV.

    Relative slice paths are resolved against the manifest's directory. An
    optional fourth ``source`` column is accepted (augmented manifests).
    Errors name the 1-based file line of the offending row.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records = []
    seen: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        header = [h.strip() for h in header]
        if tuple(header) not in (MANIFEST_COLUMNS, AUGMENTED_COLUMNS):
            raise DataError(f"{path}: bad header {header!r}")
        ncol = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DataError(f"{path}: row {lineno}: expected {ncol} columns, got {len(row)}")
            patient_id, slice_path, label = (c.strip() for c in row[:3])
            if label not in Label._value2member_map_:
                raise DataError(f"{path}: row {lineno}: unknown label {label!r}")
            source = row[3].strip() if ncol == 4 else Source.ORIGINAL.value
            if source not in Source._value2member_map_:
                raise DataError(f"{path}: row {lineno}: unknown source {source!r}")
            if not patient_id:
                raise DataError(f"{path}: row {lineno}: empty patient_id")
            resolved = slice_path if os.path.isabs(slice_path) else str(base / slice_path)
            if resolved in seen:
                raise DataError(
                    f"{path}: row {lineno}: duplicate slice_path {slice_path!r} (first at row {seen[resolved]})"
                )
            seen[resolved] = lineno
            if check_files and not os.access(resolved, os.R_OK):
                raise DataError(f"{path}: row {lineno}: unreadable image {slice_path!r}")
            records.append(SliceRecord(patient_id, resolved, Label(label), Source(source)))
    return DatasetManifest(tuple(records))


def write_manifest(records: Iterable[SliceRecord], path: str | os.PathLike, with_source: bool = False) -> None:
    columns = AUGMENTED_COLUMNS if with_source else MANIFEST_COLUMNS
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            if "," in rec.slice_path or "," in rec.patient_id:
                raise DataError(f"commas are not allowed in manifest fields: {rec.slice_path!r}")
            row = [rec.patient_id, rec.slice_path, rec.label.value]
            if with_source:
                row.append(rec.source.value)
            writer.writerow(row)


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ValueError(f"need three ratios (train, val, test), got {len(ratios)}")
    r = tuple(float(x) for x in ratios)
    if any(x < 0 or not math.isfinite(x) for x in r):
        raise ValueError(f"ratios must be finite and non-negative: {r}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(r)!r}")
    return r  # type: ignore[return-value]


def split_counts(n_patients: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Patient counts per partition: val and test take floors, train the rest.

    The two discarded fractions can push train up to two patients past its
    target; when it overshoots by more than one, the partition with the
    larger remainder gets one more patient so every count stays within one
    patient of ``ratio * n_patients``.
    """
    r_train, r_val, r_test = _check_ratios(ratios)
    # guard against 0.29 * 100 == 28.999999999999996
    n_val = math.floor(r_val * n_patients + 1e-9)
    n_test = math.floor(r_test * n_patients + 1e-9)
    n_train = n_patients - n_val - n_test
    if n_train - r_train * n_patients > 1 + 1e-9:
        if r_val * n_patients - n_val >= r_test * n_patients - n_test:
            n_val += 1
        else:
            n_test += 1
        n_train -= 1
    return n_train, n_val, n_test


def split_by_patient(manifest: DatasetManifest, ratios: Sequence[float], seed: int) -> SplitAssignment:
    ratios = _check_ratios(ratios)
    patients = sorted(p for p, idx in manifest.patients.items()
                      if any(manifest.records[i].source is Source.ORIGINAL for i in idx))
    if not patients:
        raise DataError("cannot split an empty manifest")
    _, n_val, n_test = split_counts(len(patients), ratios)
    order = np.random.default_rng(seed).permutation(len(patients))
    partition_of = {}
    for rank, i in enumerate(order):
        if rank < n_val:
            part = Partition.VAL
        elif rank < n_val + n_test:
            part = Partition.TEST
        else:
            part = Partition.TRAIN
        partition_of[patients[i]] = part
    return SplitAssignment(partition_of=partition_of, ratios=ratios, seed=int(seed))


def slices_for(assignment: SplitAssignment, manifest: DatasetManifest | Sequence[SliceRecord],
               part: Partition) -> list[SliceRecord]:
    """Records of ``manifest`` whose patient is assigned to ``part``.

    Generated records only ever come back for the train partition.
    """
    part = Partition(part)
    records = manifest.records if isinstance(manifest, DatasetManifest) else tuple(manifest)
    out = []
    for rec in records:
        try:
            where = assignment.partition_of[rec.patient_id]
        except KeyError:
            raise DataError(f"patient {rec.patient_id!r} has no partition in this assignment") from None
        if where is not part:
            continue
        if rec.source is Source.GENERATED and part is not Partition.TRAIN:
            continue
        out.append(rec)
    if isinstance(manifest, DatasetManifest):
        unknown = set(assignment.partition_of) - set(manifest.patients)
    else:
        unknown = set()
    if unknown:
        raise DataError(f"assignment references {len(unknown)} unknown patient(s), e.g. {min(unknown)!r}")
    return out


def class_counts(records: Iterable[SliceRecord]) -> tuple[int, int]:
    covid = normal = 0
    for rec in records:
        if rec.label is Label.COVID:
            covid += 1
        else:
            normal += 1
    return covid, normal
