"""Acceptance criteria, each checked at its stated tolerance and runtime budget.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import csv
import json
import math
import time

import numpy as np
import torch

from ctaug import cli
from ctaug.cyclegan import CycleGanLossWeights, CycleGanModel, DiscriminatorSpec, GeneratorSpec, fit, translate
from ctaug.cyclegan.augment import to_gan_range
from ctaug.data_catalog import DatasetManifest, Label, Partition, SliceRecord, split_by_patient
from ctaug.evalkit import (
    ConfusionMatrix,
    aggregate_runs,
    auc,
    metrics_from_confusion,
    roc_curve,
)
from ctaug.finetune import (
    BackboneSpec,
    TrainConfig,
    body_parameters,
    build_classifier,
    make_loader,
    set_deterministic,
    two_stage_finetune,
)
from ctaug.preprocess import AugmentPolicy, GaussianSpec, gaussian_filter, save_image
from ctaug.synthetic import separable_images, shapes_domains, write_synthetic_dataset

from oracles import counted_metrics, dense_gaussian, pairwise_auc
from test_cyclegan import gradient_check


def _close(a, b, tol):
    if a is None or b is None:
        return a is None and b is None
    return abs(float(a) - float(b)) <= tol


def test_01_metric_oracle(record_acceptance):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, mismatches = 0.0, 0
    for _ in range(10_000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 50, size=4))
        if tp + tn + fp + fn == 0:
            tn = 1
        # brute force over an explicit prediction list
        preds = ["c"] * tp + ["n"] * tn + ["c"] * fp + ["n"] * fn
        truths = ["c"] * tp + ["n"] * tn + ["n"] * fp + ["c"] * fn
        _, acc, prec, rec, f1 = counted_metrics(preds, truths, "c")
        m = metrics_from_confusion(ConfusionMatrix(tp, tn, fp, fn))
        for got, want in ((m.accuracy, acc), (m.precision, prec), (m.recall, rec), (m.f1, f1)):
            if not _close(got, want, 1e-12):
                mismatches += 1
            elif want is not None:
                worst = max(worst, abs(got - float(want)))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    record_acceptance(1, ok, "metric oracle equivalence",
                      f"10000 matrices, {mismatches} mismatches, max |diff| {worst:.1e} (tol 1e-12), {elapsed:.1f}s (<10s)")
    assert ok


def test_02_auc_identity(record_acceptance):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        truths = rng.integers(0, 2, size=n)
        truths[0], truths[1] = 0, 1
        # coarse grid forces ties in some sets
        scores = rng.random(n) if rng.random() < 0.5 else rng.integers(0, 10, size=n) / 10
        area = auc(roc_curve(scores, truths.tolist(), 1))
        ref = pairwise_auc(scores[truths == 1], scores[truths == 0])
        worst = max(worst, abs(area - ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 30
    record_acceptance(2, ok, "AUC pairwise identity", f"500 score sets, max |diff| {worst:.1e} (tol 1e-9), {elapsed:.1f}s (<30s)")
    assert ok


def _record_pool(n_patients=500, max_slices=40):
    return {label: [[SliceRecord(f"pt{p:04d}", f"/img/pt{p:04d}/{s}.png", label) for s in range(max_slices)]
                    for p in range(n_patients)] for label in Label}


def _pooled_manifest(rng, pool, n_patients, max_slices=40):
    # same distribution as helpers.random_manifest, reusing immutable records
    covid = (rng.random(n_patients) < 0.5).tolist()
    sizes = rng.integers(1, max_slices + 1, size=n_patients).tolist()
    records = [r for p in range(n_patients)
               for r in pool[Label.COVID if covid[p] else Label.NORMAL][p][:sizes[p]]]
    return DatasetManifest(tuple(records[i] for i in rng.permutation(len(records)).tolist()))


def test_03_patient_split_properties(record_acceptance):
    rng = np.random.default_rng(3)
    pool = _record_pool()
    start = time.perf_counter()
    overlap = coverage = ratio_dev = 0
    worst_dev = 0.0
    for i in range(1000):
        n_patients = int(rng.integers(1, 501))
        manifest = _pooled_manifest(rng, pool, n_patients)
        val = float(rng.uniform(0.0, 0.3))
        test = float(rng.uniform(0.0, 0.3))
        ratios = (1 - val - test, val, test)
        assignment = split_by_patient(manifest, ratios, seed=i)
        parts = {p: set(assignment.patients_in(p)) for p in Partition}
        if any(parts[a] & parts[b] for a in Partition for b in Partition if a is not b):
            overlap += 1
        if set().union(*parts.values()) != set(manifest.patients):
            coverage += 1
        for p, r in zip(Partition, ratios):
            dev = abs(len(parts[p]) - r * n_patients)
            worst_dev = max(worst_dev, dev)
            if dev > 1:
                ratio_dev += 1
        # every slice of a patient sits with the patient
        if sum(len(manifest.patients[pid]) for pid in assignment.partition_of) != len(manifest):
            coverage += 1
    elapsed = time.perf_counter() - start
    ok = overlap == coverage == ratio_dev == 0 and elapsed < 30
    record_acceptance(3, ok, "patient-split properties",
                      f"1000 manifests, {overlap} disjointness / {coverage} coverage violations, "
                      f"max ratio deviation {worst_dev:.3f} patients (<=1), {elapsed:.1f}s (<30s)")
    assert ok


def test_04_gaussian_filter(record_acceptance):
    rng = np.random.default_rng(4)
    spec = GaussianSpec()
    worst = 0.0
    for _ in range(100):
        img = rng.random((32, 32))
        worst = max(worst, float(np.max(np.abs(gaussian_filter(img, spec) - dense_gaussian(img, spec.sigma, spec.kernel_radius)))))
    constants = [np.full((32, 32), c) for c in (0.0, 0.37, 1.0, 1 / 3)]
    exact = all(np.array_equal(gaussian_filter(c, spec), c) for c in constants)
    ok = worst <= 1e-6 and exact
    record_acceptance(4, ok, "gaussian filter vs dense oracle",
                      f"100 images, max |diff| {worst:.1e} (tol 1e-6), constant identity exact: {exact}")
    assert ok


def test_05_cyclegan_smoke(record_acceptance):
    start = time.perf_counter()
    dom_a, dom_b = shapes_domains(200, 64, seed=5)
    a = torch.from_numpy(to_gan_range(dom_a)[:, None].astype(np.float32))
    b = torch.from_numpy(to_gan_range(dom_b)[:, None].astype(np.float32))
    torch.manual_seed(5)
    model = CycleGanModel.build(GeneratorSpec(64, base_width=32), DiscriminatorSpec(64, base_width=32), seed=5)
    capacity = model.buffer_a.capacity
    max_buffer = 0

    def watch(i, losses):
        nonlocal max_buffer
        max_buffer = max(max_buffer, len(model.buffer_a), len(model.buffer_b))

    history = fit(model, a, b, steps=200, weights=CycleGanLossWeights(), seed=5, on_step=watch)
    first, last = history[0]["cycle"], history[-1]["cycle"]
    finite = all(math.isfinite(h["g_total"]) for h in history)
    outs = torch.cat([translate(model, a, "a_to_b"), translate(model, b, "b_to_a")])
    lo, hi = float(outs.min()), float(outs.max())
    elapsed = time.perf_counter() - start
    drop = 1 - last / first
    ok = finite and drop >= 0.5 and -1 <= lo and hi <= 1 and max_buffer <= capacity and elapsed < 15 * 60
    record_acceptance(5, ok, "CycleGAN desk-scale smoke",
                      f"cycle term {first:.3f} -> {last:.3f} ({drop:.0%} drop, need >=50%), outputs in "
                      f"[{lo:.3f}, {hi:.3f}], buffer max {max_buffer}/{capacity}, {elapsed:.0f}s (<900s)")
    assert ok


def test_06_generator_gradient_check(record_acceptance):
    start = time.perf_counter()
    err = gradient_check(n_params=20, seed=6)
    elapsed = time.perf_counter() - start
    ok = err <= 1e-3 and elapsed < 120
    record_acceptance(6, ok, "generator gradient check", f"max relative error {err:.1e} (tol 1e-3), {elapsed:.1f}s (<120s)")
    assert ok


def test_07_finetune_smoke(tmp_path, record_acceptance):
    start = time.perf_counter()
    imgs, labels = separable_images(100, 64, seed=7)
    records = []
    for i, (img, lab) in enumerate(zip(imgs, labels)):
        path = tmp_path / f"{i:03d}.png"
        save_image(img, path)
        records.append(SliceRecord(f"p{i:03d}", str(path), Label.COVID if lab else Label.NORMAL))
    train, val = records[:80], records[80:]
    set_deterministic(7)
    model = build_classifier(BackboneSpec("densenet121", pretrained=False, input_dim=64))
    body_before = [p.detach().clone() for p in body_parameters(model)]
    frozen = []

    def after_epoch(rec):
        if rec.stage == 1:
            frozen.append(all(torch.equal(x, y) for x, y in zip(body_before, body_parameters(model))))

    cfg = TrainConfig.for_backbone("densenet121", stage1_epochs=1, stage2_max_epochs=4, seed=7)
    policy = AugmentPolicy(presize_dim=72, final_dim=64)
    run = two_stage_finetune(model, make_loader(train, policy, True, cfg.batch_size, 7),
                             make_loader(val, AugmentPolicy.identity(72, 64), False, cfg.batch_size), cfg,
                             on_epoch=after_epoch)
    accs = run.curve.values("val_accuracy")
    elapsed = time.perf_counter() - start
    ok = max(accs) >= 0.95 and len(accs) <= 5 and frozen == [True] and elapsed < 600
    record_acceptance(7, ok, "fine-tune smoke (densenet121, 64px)",
                      f"val accuracy per epoch {[round(a, 3) for a in accs]} (need >=0.95 within 5), "
                      f"stage-1 body bitwise unchanged: {frozen == [True]}, {elapsed:.0f}s (<600s)")
    assert ok


def test_08_aggregation(record_acceptance):
    two = aggregate_runs([0.9, 1.0], 0.95)
    ten = aggregate_runs([0.93] * 10, 0.95)
    ok = abs(two.mean - 0.95) <= 1e-12 and abs(two.half_width - 0.6353) <= 1e-4 and ten.half_width == 0.0
    record_acceptance(8, ok, "run aggregation",
                      f"{{0.9, 1.0}} -> mean {two.mean:.4f}, half-width {two.half_width:.4f} (0.6353 +- 1e-4); "
                      f"ten equal values -> half-width {ten.half_width!r}")
    assert ok


def _read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["score"]) for r in rows], [Label(r["label"]) for r in rows]


def test_09_end_to_end_pipeline(tmp_path, record_acceptance):
    start = time.perf_counter()
    write_synthetic_dataset(tmp_path / "data", n_patients=20, slices_per_patient=10, dim=32, seed=9)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "manifest_path": "data/manifest.csv",
        "preprocess": {"presize_dim": 36, "final_dim": 32},
        "cyclegan": {"steps": 30, "input_dim": 32, "base_width": 8, "n_res_blocks": 2, "ratio": 1.0},
        "backbones": [{"id": "densenet121", "pretrained": False}],
        "training": {"stage1_epochs": 1, "stage2_max_epochs": 1, "n_runs": 3, "deterministic": True},
    }))
    codes = {cmd: cli.main([cmd, "--config", str(cfg_path)])
             for cmd in ("prepare", "train-cyclegan", "generate", "train-eval", "report")}
    table = (tmp_path / "reports" / "comparison.md").read_text()
    problems = []
    n_checked = 0
    for condition in ("without", "with"):
        out = tmp_path / "reports" / "densenet121" / condition
        report = json.loads((out / "report.json").read_text())
        if len(report["runs"]) != 3:
            problems.append(f"{condition}: {len(report['runs'])} runs")
        for k, saved in enumerate(report["runs"]):
            scores, truths = _read_predictions(out / f"run_{k:02d}" / "predictions.csv")
            preds = [Label.COVID if s >= 0.5 else Label.NORMAL for s in scores]
            _, acc, prec, rec, f1 = counted_metrics(preds, truths, Label.COVID)
            pos = [s for s, t in zip(scores, truths) if t is Label.COVID]
            neg = [s for s, t in zip(scores, truths) if t is Label.NORMAL]
            area = pairwise_auc(pos, neg) if pos and neg else None
            for name, want, tol in (("accuracy", acc, 1e-12), ("precision", prec, 1e-12), ("recall", rec, 1e-12),
                                    ("f1", f1, 1e-12), ("auc", area, 1e-9)):
                n_checked += 1
                if not _close(saved[name], want, tol):
                    problems.append(f"{condition} run {k} {name}: saved {saved[name]} vs oracle {want}")
    headers = ["Accuracy (%)", "Precision (%)", "Recall (%)", "F1-score (%)", "AUC (%)"]
    if not all(h in table for h in headers) or "without CycleGAN" not in table or "with CycleGAN" not in table:
        problems.append("comparison table incomplete")
    elapsed = time.perf_counter() - start
    ok = all(c == 0 for c in codes.values()) and not problems
    record_acceptance(9, ok, "end-to-end pipeline (synthetic 200 slices, n_runs=3)",
                      f"exit codes {codes}, {n_checked} metrics re-derived from predictions.csv, "
                      f"{len(problems)} mismatches, {elapsed:.0f}s. Headline figures (ViT 99.60 ± 0.79 without, "
                      f"ResNeSt-50 98.89 ± 1.09 with CycleGAN) are not reproducible at desk scale; "
                      f"see scripts/full_scale.md")
    assert ok, problems


def test_10_determinism(tmp_path, record_acceptance):
    write_synthetic_dataset(tmp_path / "data", n_patients=12, slices_per_patient=4, dim=32, seed=10)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "manifest_path": "data/manifest.csv",
        "preprocess": {"presize_dim": 36, "final_dim": 32},
        "cyclegan": {"enabled": False},
        "backbones": [{"id": "densenet121", "pretrained": False}],
        "training": {"stage1_epochs": 1, "stage2_max_epochs": 0, "n_runs": 1, "deterministic": True,
                     "conditions": ["without"]},
    }))
    splits, metrics = [], []
    for rep in range(2):
        overrides = ["--set", f"cache_dir=cache{rep}", "--set", f"report_dir=reports{rep}"]
        assert cli.main(["prepare", "--config", str(cfg_path), *overrides]) == 0
        assert cli.main(["train-eval", "--config", str(cfg_path), *overrides]) == 0
        splits.append((tmp_path / f"cache{rep}" / "prepare" / "split.json").read_bytes())
        report = json.loads((tmp_path / f"reports{rep}" / "densenet121" / "without" / "report.json").read_text())
        metrics.append(report["runs"][0])
    same_split = splits[0] == splits[1]
    diffs = [abs(metrics[0][k] - metrics[1][k]) for k in metrics[0] if metrics[0][k] is not None]
    same_metrics = all(d <= 1e-6 for d in diffs) and \
        [k for k in metrics[0] if metrics[0][k] is None] == [k for k in metrics[1] if metrics[1][k] is None]
    ok = same_split and same_metrics
    record_acceptance(10, ok, "determinism (prepare + 1-epoch train-eval)",
                      f"split JSON identical: {same_split}, max metric diff {max(diffs):.1e} (tol 1e-6)")
    assert ok
