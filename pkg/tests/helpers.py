"""Shared builders for tests."""

from __future__ import annotations

import numpy as np

from ctaug.data_catalog import DatasetManifest, Label, SliceRecord


def random_manifest(rng: np.random.Generator, n_patients: int, max_slices: int = 40) -> DatasetManifest:
    covid = (rng.random(n_patients) < 0.5).tolist()
    sizes = rng.integers(1, max_slices + 1, size=n_patients).tolist()
    records = [SliceRecord(f"pt{p:04d}", f"/img/pt{p:04d}/{s}.png", Label.COVID if covid[p] else Label.NORMAL)
               for p in range(n_patients) for s in range(sizes[p])]
    order = rng.permutation(len(records))
    return DatasetManifest(tuple(records[i] for i in order))


def write_rows(path, rows, header="patient_id,slice_path,label"):
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
