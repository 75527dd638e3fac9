import json
import shutil

import numpy as np
import pytest

from ctaug import cli
from ctaug.config import ExperimentConfig, apply_override, load_config
from ctaug.cyclegan.augment import generation_counts
from ctaug.data_catalog import Label, SliceRecord, SplitAssignment, Source, load_manifest, write_manifest
from ctaug.errors import ConfigError, DataError
from ctaug.preprocess import save_image
from ctaug.synthetic import write_synthetic_dataset


def write_config(tmp_path, **sections):
    cfg = {
        "manifest_path": "data/manifest.csv",
        "cache_dir": "cache",
        "report_dir": "reports",
        "preprocess": {"presize_dim": 20, "final_dim": 16},
        "cyclegan": {"steps": 3, "input_dim": 32, "base_width": 4, "n_res_blocks": 1, "ratio": 0.5},
        "backbones": [{"id": "densenet121", "pretrained": False}],
        "training": {"stage1_epochs": 1, "stage2_max_epochs": 0, "n_runs": 1},
    }
    for k, v in sections.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and isinstance(cfg.get(k), dict) else v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def dataset(tmp_path):
    write_synthetic_dataset(tmp_path / "data", n_patients=12, slices_per_patient=3, dim=16, seed=4)
    return tmp_path


def test_defaults_follow_hyperparameter_table():
    cfg = ExperimentConfig()
    assert cfg.split.ratios == [0.70, 0.15, 0.15]
    assert cfg.training.n_runs == 10
    assert cfg.cyclegan.weights.lambda_cycle == 10.0 and cfg.cyclegan.weights.lambda_identity == 5.0


def test_overrides_and_env(dataset, monkeypatch):
    path = write_config(dataset)
    cfg = load_config(path, ["training.n_runs=4", "backbones.0.id=vit", "split.ratios=[0.5,0.25,0.25]",
                             "cyclegan.checkpoint=g.ckpt"])
    assert cfg.training.n_runs == 4
    assert cfg.backbones[0].id == "vit" and cfg.backbones[0].learning_rate == 1e-5
    assert cfg.split.ratios == [0.5, 0.25, 0.25]
    assert cfg.cyclegan.checkpoint == str((dataset / "g.ckpt").resolve())
    assert cfg.cache_dir == str((dataset / "cache").resolve())
    monkeypatch.setenv("CTAUG_CACHE", str(dataset / "elsewhere"))
    assert load_config(path).cache_dir == str(dataset / "elsewhere")


@pytest.mark.parametrize("override", ["training.bogus=1", "backbones.0.id=alexnet", "training.n_runs=0",
                                      "training.conditions=[\"maybe\"]", "backbones.3.id=vit", "nokey"])
def test_bad_config_rejected(dataset, override):
    with pytest.raises(ConfigError):
        load_config(write_config(dataset), [override])


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(ConfigError, match="manifest_path"):
        load_config(write_config(tmp_path))


def test_apply_override_nested():
    data = {}
    apply_override(data, "a.b.c=[1, 2]")
    apply_override(data, "a.b.d=hello")
    assert data == {"a": {"b": {"c": [1, 2], "d": "hello"}}}


def test_exit_codes(dataset, capsys):
    path = write_config(dataset)
    assert cli.main(["prepare"]) == 1
    assert cli.main(["prepare", "--config", str(dataset / "nope.json")]) == 1
    assert cli.main(["prepare", "--config", str(path), "--set", "training.nope=1"]) == 1
    assert cli.main(["generate", "--config", str(path)]) == 2  # prepare not run yet
    assert cli.main(["prepare", "--config", str(path)]) == 0
    assert cli.main(["report", "--config", str(path)]) == 2


def test_prepare_idempotent_and_summary(dataset, capsys):
    path = write_config(dataset)
    assert cli.main(["prepare", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "slices: 36 (covid 18, normal 18), patients: 12" in out
    split = (dataset / "cache/prepare/split.json").read_bytes()
    filtered = (dataset / "cache/prepare/filtered_manifest.csv").read_bytes()
    assert cli.main(["prepare", "--config", str(path)]) == 0
    assert (dataset / "cache/prepare/split.json").read_bytes() == split
    assert (dataset / "cache/prepare/filtered_manifest.csv").read_bytes() == filtered
    assignment = SplitAssignment.load(dataset / "cache/prepare/split.json")
    assert len(assignment.partition_of) == 12


def test_prepare_missing_image_names_row(dataset, capsys):
    (dataset / "data/images/P0003/P0003_s001.png").unlink()
    assert cli.main(["prepare", "--config", str(write_config(dataset))]) == 2
    err = capsys.readouterr().err
    assert "P0003_s001.png" in err and "row 12" in err  # file line, header is line 1


def test_prepare_full_dataset_scale_counts(tmp_path, capsys):
    # 90 covid and 99 normal patients holding 1766 and 1397 slices
    rng = np.random.default_rng(0)
    img = rng.random((8, 8))
    records = []
    for label, n_patients, n_slices in ((Label.COVID, 90, 1766), (Label.NORMAL, 99, 1397)):
        for s in range(n_slices):
            pid = f"{label.value}{s % n_patients:03d}"
            rel = f"img/{pid}_{s:04d}.png"
            records.append(SliceRecord(pid, rel, label))
    (tmp_path / "data" / "img").mkdir(parents=True)
    first = tmp_path / "data" / records[0].slice_path
    save_image(img, first)
    for r in records[1:]:
        shutil.copyfile(first, tmp_path / "data" / r.slice_path)
    write_manifest(records, tmp_path / "data" / "manifest.csv")
    cfg = load_config(write_config(tmp_path))
    summary = cli.cmd_prepare(cfg)
    assert summary["total"] == {"covid": 1766, "normal": 1397}
    assert summary["patients"] == 189
    assert [summary[p]["patients"] for p in ("train", "val", "test")] == [133, 28, 28]
    assert "covid 1766, normal 1397" in capsys.readouterr().out


def test_guard_refuses_val_test_records(dataset):
    cfg = load_config(write_config(dataset))
    cli.cmd_prepare(cfg)
    _, assignment, manifest = cli._load_prepared(cfg)
    held_out = [r for r in manifest.records if assignment.partition_of[r.patient_id].value != "train"]
    with pytest.raises(DataError, match="refusing to train"):
        cli.guard_train_only(held_out[:1], assignment)
    train = [r for r in manifest.records if assignment.partition_of[r.patient_id].value == "train"]
    cli.guard_train_only(train, assignment)


def test_cyclegan_and_generate_stages(dataset):
    cfg = load_config(write_config(dataset))
    cli.cmd_prepare(cfg)
    ckpt = cli.cmd_train_cyclegan(cfg)
    assert ckpt.read_bytes().startswith(b"CYGAN-CKPT-v1\n")
    rows = (dataset / "cache/cyclegan/losses.csv").read_text().splitlines()
    assert len(rows) == 1 + 3
    mtime = ckpt.stat().st_mtime_ns
    cli.cmd_train_cyclegan(cfg)
    assert ckpt.stat().st_mtime_ns == mtime  # reused

    augmented = cli.cmd_generate(cfg)
    records = load_manifest(augmented).records
    train = load_manifest(dataset / "cache/prepare/train_manifest.csv").records
    generated = [r for r in records if r.source is Source.GENERATED]
    covid = sum(r.label is Label.COVID for r in train)
    normal = len(train) - covid
    assert (sum(r.label is Label.COVID for r in generated),
            sum(r.label is Label.NORMAL for r in generated)) == generation_counts(covid, normal, 0.5)
    assert [r for r in records if r.source is Source.ORIGINAL] == list(train)
    assert all("/generated/" in r.slice_path for r in generated)

    # ratio 0: augmented manifest equals the train manifest byte for byte
    cfg0 = load_config(write_config(dataset), ["cyclegan.ratio=0"])
    cli.cmd_generate(cfg0)
    assert augmented.read_bytes() == (dataset / "cache/prepare/train_manifest.csv").read_bytes()


def test_hash_mismatch_rejected(dataset):
    path = write_config(dataset)
    cfg = load_config(path)
    cli.cmd_prepare(cfg)
    cli.cmd_train_cyclegan(cfg)
    changed = load_config(path, ["cyclegan.base_width=8"])
    with pytest.raises(ConfigError, match="different configuration"):
        cli.cmd_generate(changed)
    resplit = load_config(path, ["split.seed=9"])
    with pytest.raises(ConfigError):
        cli.cmd_train_eval(resplit)
    assert cli.main(["generate", "--config", str(path), "--set", "cyclegan.base_width=8"]) == 1


def test_disabled_cyclegan_requires_without_only(dataset):
    with pytest.raises(ConfigError):
        load_config(write_config(dataset), ["cyclegan.enabled=false"])
    cfg = load_config(write_config(dataset), ["cyclegan.enabled=false", "training.conditions=[\"without\"]"])
    assert cli.cmd_train_cyclegan(cfg) is None


def test_device_setting(dataset):
    cfg = load_config(write_config(dataset), ["training.device=auto"])
    assert cli.resolve_device(cfg).type in ("cpu", "cuda")
    assert cli.resolve_device(load_config(write_config(dataset))).type == "cpu"
    with pytest.raises(ConfigError):
        load_config(write_config(dataset), ["training.device=tpu"])
    # execution device does not change what a stage computes, so it stays out of the hash
    other = load_config(write_config(dataset), ["training.device=auto"])
    assert cli.train_hash(cfg, cfg.backbones[0], "without") == cli.train_hash(other, other.backbones[0], "without")


def test_train_eval_single_run_renders_zero_width(dataset):
    cfg = load_config(write_config(dataset), ["preprocess.presize_dim=36", "preprocess.final_dim=32",
                                              "training.conditions=[\"without\"]"])
    cli.cmd_prepare(cfg)
    reports = cli.cmd_train_eval(cfg)
    assert len(reports) == 1 and len(reports[0]["runs"]) == 1
    table = (dataset / "reports" / "comparison.md").read_text()
    row = next(line for line in table.splitlines() if line.startswith("| densenet121"))
    cells = [c.strip() for c in row.strip("|").split("|")[1:]]
    assert len(cells) == 5
    assert all(c == "n/a" or c.endswith("± 0.00") for c in cells)
    out = dataset / "reports" / "densenet121" / "without"
    for name in ("report.json", "curve.csv", "roc.csv", "curve.png", "roc.png", "classifier.ckpt",
                 "run_00/predictions.csv"):
        assert (out / name).is_file(), name
    # unchanged config: reused, not retrained
    mtime = (out / "report.json").stat().st_mtime_ns
    cli.cmd_train_eval(cfg)
    assert (out / "report.json").stat().st_mtime_ns == mtime
