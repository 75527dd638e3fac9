"""``ctaug`` command line: prepare, train-cyclegan, generate, train-eval, report.

Each stage writes its outputs under the cache or report directory together
with a ``meta.json`` carrying the hash of the configuration it was built
from. Downstream stages refuse artifacts whose hash does not match the
current configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import traceback
from pathlib import Path

import torch

from . import cyclegan as cg
from .config import ExperimentConfig, digest, file_digest, load_config
from .data_catalog import (
    DatasetManifest,
    Label,
    Partition,
    SliceRecord,
    Source,
    SplitAssignment,
    class_counts,
    load_manifest,
    slices_for,
    split_by_patient,
    write_manifest,
)
from .errors import ConfigError, CtaugError, DataError, TrainingError
from .evalkit import Evaluation, comparison_table, eval_report, evaluate_model, write_report
from .finetune import (
    CLASS_NAMES,
    BackboneSpec,
    TrainConfig,
    build_classifier,
    make_loader,
    predict_loader,
    save_classifier,
    set_deterministic,
    two_stage_finetune,
)
from .preprocess import AugmentPolicy, GaussianSpec, cached_filtered

log = logging.getLogger("ctaug")


# -- artifact layout and hashes -------------------------------------------------

class Paths:
    def __init__(self, cfg: ExperimentConfig):
        cache = Path(cfg.cache_dir)
        self.cache = cache
        self.filtered = cache / "filtered"
        self.prepare = cache / "prepare"
        self.split = self.prepare / "split.json"
        self.filtered_manifest = self.prepare / "filtered_manifest.csv"
        self.train_manifest = self.prepare / "train_manifest.csv"
        self.prepare_meta = self.prepare / "meta.json"
        self.cyclegan = cache / "cyclegan"
        self.checkpoint = Path(cfg.cyclegan.checkpoint) if cfg.cyclegan.checkpoint else self.cyclegan / "cyclegan.ckpt"
        self.gan_losses = self.cyclegan / "losses.csv"
        self.augmented_manifest = cache / "generated" / "augmented_manifest.csv"
        self.generate_meta = cache / "generated" / "meta.json"
        self.reports = Path(cfg.report_dir)

    def run_dir(self, backbone: str, condition: str) -> Path:
        return self.reports / backbone / condition


def prepare_hash(cfg: ExperimentConfig) -> str:
    return digest("prepare", file_digest(cfg.manifest_path), dataclasses.asdict(cfg.split),
                  dataclasses.asdict(cfg.preprocess.gaussian))


def cyclegan_hash(cfg: ExperimentConfig) -> str:
    knobs = {k: v for k, v in dataclasses.asdict(cfg.cyclegan).items()
             if k not in ("enabled", "ratio", "checkpoint")}
    return digest("cyclegan", prepare_hash(cfg), knobs)


def generate_hash(cfg: ExperimentConfig) -> str:
    return digest("generate", cyclegan_hash(cfg), cfg.cyclegan.ratio)


def train_hash(cfg: ExperimentConfig, backbone, condition: str) -> str:
    upstream = generate_hash(cfg) if condition == "with" else prepare_hash(cfg)
    training = {k: v for k, v in dataclasses.asdict(cfg.training).items()
                if k not in ("conditions", "num_workers", "device")}
    pre = {k: v for k, v in dataclasses.asdict(cfg.preprocess).items() if k != "gaussian"}
    return digest("train", condition, upstream, dataclasses.asdict(backbone), training, pre)


def _write_meta(path: Path, **fields) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_meta(path: Path) -> dict | None:
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _require(meta_path: Path, expected: str, stage: str) -> dict:
    meta = _read_meta(meta_path)
    if meta is None:
        raise DataError(f"missing {stage} outputs ({meta_path}); run `ctaug {stage}` first")
    if meta.get("config_hash") != expected:
        raise ConfigError(f"{meta_path} was built from a different configuration; rerun `ctaug {stage}`")
    return meta


def _write_if_changed(path: Path, text: str) -> None:
    if not path.is_file() or path.read_text(encoding="utf-8") != text:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def resolve_device(cfg: ExperimentConfig) -> torch.device:
    name = cfg.training.device
    if name == "auto":
        name = "cuda" if torch.cuda.is_available() else "cpu"
    if name.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigError(f"training.device is {cfg.training.device!r} but CUDA is not available")
    return torch.device(name)


def augment_policy(cfg: ExperimentConfig, train: bool = True) -> AugmentPolicy:
    pre = cfg.preprocess
    if not train:
        return AugmentPolicy.identity(pre.presize_dim, pre.final_dim)
    a = pre.augment
    return AugmentPolicy(a.flip_prob, a.max_rotate_deg, tuple(a.zoom_range), a.warp_magnitude,
                         tuple(a.lighting_range), pre.presize_dim, pre.final_dim)


def _load_prepared(cfg: ExperimentConfig) -> tuple[Paths, SplitAssignment, DatasetManifest]:
    paths = Paths(cfg)
    _require(paths.prepare_meta, prepare_hash(cfg), "prepare")
    return paths, SplitAssignment.load(paths.split), load_manifest(paths.filtered_manifest)


def guard_train_only(records, assignment: SplitAssignment) -> None:
    """Raise if any record belongs to a validation or test patient."""
    for rec in records:
        if assignment.partition_of.get(rec.patient_id) is not Partition.TRAIN:
            raise DataError(f"refusing to train on {rec.slice_path!r}: patient {rec.patient_id!r} is not in train")


# -- subcommands --------------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig, force: bool = False) -> dict:
    paths = Paths(cfg)
    manifest = load_manifest(cfg.manifest_path)
    assignment = split_by_patient(manifest, cfg.split.ratios, cfg.split.seed)
    spec = GaussianSpec(cfg.preprocess.gaussian.sigma, cfg.preprocess.gaussian.kernel_radius)
    paths.filtered.mkdir(parents=True, exist_ok=True)
    filtered = []
    for i, rec in enumerate(manifest.records):
        try:
            target = cached_filtered(rec.slice_path, spec, paths.filtered)
        except DataError as exc:
            raise DataError(f"{cfg.manifest_path}: record {i + 1} ({rec.slice_path}): {exc}") from exc
        filtered.append(SliceRecord(rec.patient_id, str(target), rec.label, rec.source))
    paths.prepare.mkdir(parents=True, exist_ok=True)
    _write_if_changed(paths.split, assignment.to_json())
    write_manifest(filtered, paths.filtered_manifest, with_source=True)
    train = slices_for(assignment, DatasetManifest(tuple(filtered)), Partition.TRAIN)
    write_manifest(train, paths.train_manifest, with_source=True)
    names = {f.slice_path: r.slice_path for f, r in zip(filtered, manifest.records)}
    (paths.prepare / "source_names.json").write_text(json.dumps(names, indent=1, sort_keys=True) + "\n")

    summary = {"total": dict(zip(("covid", "normal"), class_counts(manifest.records))),
               "patients": len(manifest.patients)}
    for part in Partition:
        recs = slices_for(assignment, manifest, part)
        covid, normal = class_counts(recs)
        summary[part.value] = {"patients": len(assignment.patients_in(part)), "slices": len(recs),
                               "covid": covid, "normal": normal}
    _write_meta(paths.prepare_meta, config_hash=prepare_hash(cfg), summary=summary)
    print(f"slices: {len(manifest)} (covid {summary['total']['covid']}, normal {summary['total']['normal']}), "
          f"patients: {summary['patients']}")
    for part in Partition:
        s = summary[part.value]
        print(f"  {part.value:5s} patients {s['patients']:4d}  slices {s['slices']:5d}  "
              f"covid {s['covid']:5d}  normal {s['normal']:5d}")
    return summary


def _gan_steps(cfg: ExperimentConfig, n_a: int, n_b: int) -> int:
    c = cfg.cyclegan
    if c.steps is not None:
        return int(c.steps)
    return c.epochs * math.ceil(max(n_a, n_b) / c.batch_size)


def cmd_train_cyclegan(cfg: ExperimentConfig, force: bool = False) -> Path | None:
    if not cfg.cyclegan.enabled:
        print("cyclegan disabled; nothing to do")
        return None
    paths, assignment, manifest = _load_prepared(cfg)
    expected = cyclegan_hash(cfg)
    if not force and paths.checkpoint.is_file():
        _, payload = cg.load_checkpoint(paths.checkpoint)
        if payload["extra"].get("config_hash") == expected:
            print(f"checkpoint up to date: {paths.checkpoint}")
            return paths.checkpoint

    train = [r for r in slices_for(assignment, manifest, Partition.TRAIN) if r.source is Source.ORIGINAL]
    guard_train_only(train, assignment)
    c = cfg.cyclegan
    spec = cg.GeneratorSpec(c.input_dim, c.base_width, c.n_res_blocks)
    dom_a = [r.slice_path for r in train if r.label is Label.NORMAL]
    dom_b = [r.slice_path for r in train if r.label is Label.COVID]
    if not dom_a or not dom_b:
        raise DataError("CycleGAN training needs train slices of both classes")
    images_a = cg.augment.load_gan_batch(dom_a, spec.input_dim, spec.channels)
    images_b = cg.augment.load_gan_batch(dom_b, spec.input_dim, spec.channels)
    steps = _gan_steps(cfg, len(dom_a), len(dom_b))

    if cfg.training.deterministic:
        set_deterministic(c.seed)
    model = cg.CycleGanModel.build(spec, buffer_capacity=c.buffer_capacity, seed=c.seed).to(resolve_device(cfg))
    opt = cg.CycleGanOptim.build(model, lr=c.learning_rate, total_steps=steps)
    weights = cg.CycleGanLossWeights(c.weights.lambda_cycle, c.weights.lambda_identity)
    paths.gan_losses.parent.mkdir(parents=True, exist_ok=True)
    with open(paths.gan_losses, "w", newline="") as fh:
        writer = None

        def on_step(i, losses):
            nonlocal writer
            if writer is None:
                writer = csv.DictWriter(fh, fieldnames=["step"] + sorted(losses), lineterminator="\n")
                writer.writeheader()
            writer.writerow({"step": i + 1, **losses})
            if (i + 1) % 50 == 0 or i + 1 == steps:
                log.info("cyclegan step %d/%d cycle=%.4f g_total=%.4f", i + 1, steps, losses["cycle"],
                         losses["g_total"])

        cg.fit(model, images_a, images_b, steps, weights, batch_size=c.batch_size, seed=c.seed, opt=opt,
               on_step=on_step)
    cg.save_checkpoint(model, paths.checkpoint, opt, extra={"config_hash": expected})
    print(f"trained CycleGAN for {steps} steps -> {paths.checkpoint}")
    return paths.checkpoint


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path | None:
    if not cfg.cyclegan.enabled:
        print("cyclegan disabled; nothing to do")
        return None
    paths, assignment, manifest = _load_prepared(cfg)
    expected = generate_hash(cfg)
    meta = _read_meta(paths.generate_meta)
    if not force and meta and meta.get("config_hash") == expected and paths.augmented_manifest.is_file():
        print(f"augmented manifest up to date: {paths.augmented_manifest}")
        return paths.augmented_manifest
    if not paths.checkpoint.is_file():
        raise DataError(f"missing CycleGAN checkpoint {paths.checkpoint}; run `ctaug train-cyclegan` first")
    model, payload = cg.load_checkpoint(paths.checkpoint)
    if payload["extra"].get("config_hash") != cyclegan_hash(cfg):
        raise ConfigError(f"{paths.checkpoint} was trained under a different configuration")
    model.to(resolve_device(cfg))

    train = [r for r in slices_for(assignment, manifest, Partition.TRAIN) if r.source is Source.ORIGINAL]
    names_file = paths.prepare / "source_names.json"
    names = json.loads(names_file.read_text()) if names_file.is_file() else None
    generated = cg.generate_augmented_set(model, train, cfg.cyclegan.ratio, paths.cache, seed=cfg.cyclegan.seed,
                                          assignment=assignment, names=names)
    write_manifest(train + generated, paths.augmented_manifest, with_source=True)
    covid, normal = class_counts(generated)
    _write_meta(paths.generate_meta, config_hash=expected, generated={"covid": covid, "normal": normal})
    print(f"generated {len(generated)} slices (covid {covid}, normal {normal}) -> {paths.augmented_manifest}")
    return paths.augmented_manifest


def _plot_curves(curves, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, curve in enumerate(curves):
        epochs = [r.epoch for r in curve.records]
        ax.plot(epochs, [r.train_loss for r in curve.records], color="C0", alpha=0.6,
                label="train" if i == 0 else None)
        ax.plot(epochs, [r.val_loss for r in curve.records], color="C1", alpha=0.6,
                label="valid" if i == 0 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_roc(evaluation: Evaluation, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    auc = evaluation.metrics.auc
    ax.plot(evaluation.roc.fpr, evaluation.roc.tpr, label=f"AUC {auc:.4f}" if auc is not None else None)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    if auc is not None:
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_predictions(path: Path, records, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice_path", "label", "score"])
        for rec, s in zip(records, scores):
            w.writerow([rec.slice_path, rec.label.value, repr(float(s))])


def _train_eval_one(cfg: ExperimentConfig, backbone, condition: str, train, val, test, out: Path) -> dict:
    t = cfg.training
    spec = BackboneSpec(backbone.id, backbone.pretrained, cfg.preprocess.final_dim, backbone.weights_path)
    train_policy, eval_policy = augment_policy(cfg, True), augment_policy(cfg, False)
    positive_col = CLASS_NAMES.index(Label.COVID)
    device = resolve_device(cfg)
    runs, curves, best_epochs = [], [], []
    last_eval = last_run = last_model = None
    for k in range(t.n_runs):
        seed = t.seed + k
        run_cfg = TrainConfig(backbone.batch_size, backbone.learning_rate, t.stage1_epochs, t.stage2_max_epochs,
                              t.patience, t.metric, seed, condition == "with", cfg.cyclegan.ratio)
        if t.deterministic:
            set_deterministic(seed)
        try:
            model = build_classifier(spec).to(device)
            train_loader = make_loader(train, train_policy, True, run_cfg.batch_size, seed, t.num_workers)
            val_loader = make_loader(val, eval_policy, False, run_cfg.batch_size, seed, t.num_workers)
            run = two_stage_finetune(
                model, train_loader, val_loader, run_cfg,
                on_epoch=lambda r: log.info("%s/%s run %d epoch %d: train %.4f val %.4f acc %.4f", backbone.id,
                                            condition, k, r.epoch, r.train_loss, r.val_loss, r.val_accuracy))

            def predict(records):
                loader = make_loader(records, eval_policy, False, run_cfg.batch_size, seed, t.num_workers)
                return predict_loader(model, loader)[:, positive_col]

            evaluation = evaluate_model(predict, test, Label.COVID)
        except CtaugError as exc:
            if isinstance(exc, (ConfigError, DataError)):
                raise
            raise TrainingError(f"{backbone.id}/{condition} run {k}: {exc}") from exc
        except Exception as exc:
            raise TrainingError(f"{backbone.id}/{condition} run {k}: {exc!r}") from exc
        run_dir = out / f"run_{k:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        run.curve.to_csv(run_dir / "curve.csv")
        evaluation.roc.to_csv(run_dir / "roc.csv")
        write_predictions(run_dir / "predictions.csv", test, evaluation.scores)
        runs.append(evaluation.metrics)
        curves.append(run.curve)
        best_epochs.append(run.best_epoch)
        last_eval, last_run, last_model = evaluation, run, model

    config_hash = train_hash(cfg, backbone, condition)
    report = eval_report(backbone.id, condition == "with", runs, last_eval, t.confidence,
                         config_hash=config_hash, n_runs=t.n_runs, best_epochs=best_epochs)
    write_report(report, out / "report.json")
    last_run.curve.to_csv(out / "curve.csv")
    last_eval.roc.to_csv(out / "roc.csv")
    title = f"{backbone.id} ({condition} CycleGAN)"
    _plot_curves(curves, out / "curve.png", title)
    _plot_roc(last_eval, out / "roc.png", title)
    save_classifier(last_model, out / "classifier.ckpt", last_run.best_epoch, config_hash)
    return report


def cmd_train_eval(cfg: ExperimentConfig, force: bool = False) -> list[dict]:
    paths, assignment, manifest = _load_prepared(cfg)
    val = slices_for(assignment, manifest, Partition.VAL)
    test = slices_for(assignment, manifest, Partition.TEST)
    base_train = [r for r in slices_for(assignment, manifest, Partition.TRAIN) if r.source is Source.ORIGINAL]
    if not val or not test:
        raise DataError("validation and test partitions must be non-empty; add patients or adjust split.ratios")
    reports = []
    for backbone in cfg.backbones:
        for condition in cfg.training.conditions:
            out = paths.run_dir(backbone.id, condition)
            expected = train_hash(cfg, backbone, condition)
            existing = _read_meta(out / "report.json")
            if not force and existing and existing.get("config_hash") == expected:
                print(f"{backbone.id}/{condition}: up to date")
                reports.append(existing)
                continue
            if condition == "with":
                _require(paths.generate_meta, generate_hash(cfg), "generate")
                train = list(load_manifest(paths.augmented_manifest).records)
            else:
                train = base_train
            guard_train_only(train, assignment)
            reports.append(_train_eval_one(cfg, backbone, condition, train, val, test, out))
    table = _write_table(paths.reports, reports)
    print(table)
    return reports


def _write_table(report_dir: Path, reports) -> str:
    report_dir.mkdir(parents=True, exist_ok=True)
    table = comparison_table(reports)
    (report_dir / "comparison.md").write_text(table + "\n", encoding="utf-8")
    return table


def cmd_report(cfg: ExperimentConfig, force: bool = False) -> str:
    paths = Paths(cfg)
    reports = []
    for backbone in cfg.backbones:
        for condition in cfg.training.conditions:
            path = paths.run_dir(backbone.id, condition) / "report.json"
            report = _read_meta(path)
            if report is None:
                raise DataError(f"missing {path}; run `ctaug train-eval` first")
            if report.get("config_hash") != train_hash(cfg, backbone, condition):
                raise ConfigError(f"{path} was produced under a different configuration")
            reports.append(report)
    table = _write_table(paths.reports, reports)
    print(table)
    return table


COMMANDS = {
    "prepare": cmd_prepare,
    "train-cyclegan": cmd_train_cyclegan,
    "generate": cmd_generate,
    "train-eval": cmd_train_eval,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctaug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. training.n_runs=3")
        p.add_argument("--force", action="store_true", help="ignore up-to-date outputs and rebuild")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](cfg, force=args.force)
    except CtaugError as exc:
        print(f"ctaug {args.command}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return exc.exit_code
    except ValueError as exc:
        print(f"ctaug {args.command}: invalid setting: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
