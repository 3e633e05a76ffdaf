"""Command-line pipeline: ingest, preprocess, segment, augment, train, crossval, evaluate, predict.

Every stage writes into ``<workdir>/run-<config hash>-s<seed>/<stage>/`` a
manifest (or metrics) plus ``<stage>.log``, and reads the previous stage's
manifest from the same run directory.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import augmentation, dataset, imaging, segmentation, training
from .config import RunConfig
from .errors import EmptyForegroundError, EmptyMaskError, MissingArtifactError, SkinLesionError, ValidationError
from .models import CLASS_NAMES, build_model, forward
from .persistence import load_weights, save_weights
from .report import write_report
from .synthetic import classification_dataset
from .tensor import no_grad

log = logging.getLogger("skinlesion")

# --- run directory -----------------------------------------------------------


class RunDir:
    def __init__(self, root: Path):
        self.root = root

    def stage(self, name: str) -> Path:
        return self.root / name

    def manifest(self, name: str) -> Path:
        return self.root / name / "manifest.csv"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, f"run the '{producer}' stage first with the same config and seed")
        return path

    @contextlib.contextmanager
    def locked(self):
        """Advisory exclusive lock; a second process on the same run dir fails fast."""
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.root / ".lock", "w")
        try:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise SkinLesionError(f"run directory {self.root} is locked by another process") from None
            yield self
        finally:
            fh.close()


@contextlib.contextmanager
def stage_log(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("skinlesion")
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


# --- shared preprocessing ----------------------------------------------------


def preprocess_image(img, cfg: RunConfig, mask=None):
    """Crop the black border, normalise colour, resize; returns ``(image, mask)``.

    The crop runs before colour normalisation. ``mask``, if given, follows
    the same crop and a nearest-neighbour resize.
    """
    img = imaging.as_image(img)
    top, left, h, w = imaging.foreground_box(img, cfg.crop_threshold)
    img = img[top : top + h, left : left + w]
    if img.shape[2] == 3:
        try:
            img = imaging.shades_of_gray(img, cfg.sog_p)
        except ValidationError as exc:
            log.warning("colour normalisation skipped: %s", exc)
    size = cfg.resolved_input_size
    img = imaging.resize(img, size, size)
    if mask is not None:
        mask = imaging.resize_mask(np.asarray(mask)[top : top + h, left : left + w], size, size)
    return img, mask


def threshold_mask(img, cfg: RunConfig) -> tuple[np.ndarray, bool]:
    """Threshold segmentation; falls back to an all-ones mask when nothing is found."""
    try:
        return segmentation.threshold_segment(img, cfg.piecewise, cfg.seg_threshold), True
    except EmptyMaskError:
        return np.ones(imaging.as_image(img).shape[:2], dtype=np.uint8), False


def unet_masks(spec, weights, images, size: int) -> list[np.ndarray]:
    side = spec.meta["config"].input_size
    small = [imaging.resize(img, side, side) for img in images]
    return [imaging.resize_mask(m, size, size) for m in segmentation.predict_masks(spec, weights, small)]


def samples_from_augment(run: RunDir) -> list[dataset.Sample]:
    """Training samples for the balanced set; originals take masks from the segment stage."""
    rows = augmentation.read_manifest(run.require(run.manifest("augment"), "augment"))
    seg = dataset.DatasetManifest.load(run.require(run.manifest("segment"), "segment"))
    masks = {r.image_id: r.mask_path for r in seg.rows}
    index = {name: i for i, name in enumerate(CLASS_NAMES)}
    out = []
    for r in rows:
        if r.op_chain:
            p = Path(r.out_path)
            mask = p.with_name(p.stem + "_mask.png")
            mask_path = str(mask) if mask.exists() else ""
        else:
            mask_path = masks.get(r.src_id, "")
        out.append(dataset.Sample(r.out_path, mask_path, index[r.cls], r.src_id))
    return out


def resolve_weights(run: RunDir, override: str | None) -> Path:
    if override:
        p = Path(override)
        if not p.exists():
            raise MissingArtifactError(p, "--weights file not found")
        return p
    for p in (run.stage("crossval") / "best.slcw", run.stage("train") / "weights.slcw"):
        if p.exists():
            return p
    raise MissingArtifactError(run.stage("crossval") / "best.slcw", "run 'crossval' or 'train', or pass --weights")


def single_report(name: str, confusion, epochs=(), losses=(), best_epoch: int = 0, n_train: int = 0):
    conf = np.asarray(confusion)
    fm = training.FoldMetrics(
        fold=0, n_train=n_train, n_val=int(conf.sum()), best_epoch=best_epoch,
        accuracy=training.accuracy(conf), mean_sensitivity=training.mean_sensitivity(conf),
        confusion=conf.tolist(), epoch_accuracies=list(epochs), epoch_losses=list(losses),
    )
    return training.MetricsReport.from_folds(name, [fm])


# --- stages ------------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig, run: RunDir) -> int:
    manifest = dataset.ingest(args.labels, args.images, args.masks)
    manifest.save(run.manifest("ingest"))
    counts = manifest.counts_report()
    log.info("ingested %d images\n%s", len(manifest), counts)
    print(counts)
    return 0


def cmd_preprocess(args, cfg: RunConfig, run: RunDir) -> int:
    src = dataset.DatasetManifest.load(run.require(run.manifest("ingest"), "ingest"))
    out_dir = run.stage("preprocess")
    rows = []
    for r in src.rows:
        mask = imaging.load_mask(r.mask_path) if r.mask_path else None
        try:
            img, mask = preprocess_image(imaging.load_image(r.path), cfg, mask)
        except EmptyForegroundError as exc:
            raise ValidationError(f"image {r.image_id!r}: {exc}") from exc
        img_path = out_dir / "images" / f"{r.image_id}.png"
        imaging.save_image(img, img_path)
        mask_path = ""
        if mask is not None:
            mask_path = str(out_dir / "masks" / f"{r.image_id}_mask.png")
            imaging.save_mask(mask, mask_path)
        rows.append(dataset.DatasetRow(r.image_id, str(img_path), r.class_id, r.split, mask_path))
    dataset.DatasetManifest(rows).save(run.manifest("preprocess"))
    log.info("preprocessed %d images to %dx%d", len(rows), cfg.resolved_input_size, cfg.resolved_input_size)
    return 0


def cmd_segment(args, cfg: RunConfig, run: RunDir) -> int:
    src = dataset.DatasetManifest.load(run.require(run.manifest("preprocess"), "preprocess"))
    out_dir = run.stage("segment")
    images = [imaging.load_image(r.path) for r in src.rows]
    size = cfg.resolved_input_size
    if cfg.segmenter == "unet":
        labelled = [(img, imaging.load_mask(r.mask_path)) for img, r in zip(images, src.rows) if r.mask_path]
        if not labelled:
            raise ValidationError("segmenter=unet needs ground-truth masks; ingest with --masks")
        ucfg = cfg.unet_config
        spec = segmentation.build_unet(ucfg)
        side = ucfg.input_size
        train = ([imaging.resize(i, side, side) for i, _ in labelled],
                 [imaging.resize_mask(m, side, side) for _, m in labelled])
        res = segmentation.train_unet(spec, train, cfg.unet_epochs, cfg.seed, lr=cfg.unet_lr,
                                      batch_size=cfg.unet_batch)
        save_weights(res.weights, out_dir / "unet.slcw")
        log.info("U-Net training Dice per epoch: %s", ", ".join(f"{d:.4f}" for d in res.dice_history))
        masks = unet_masks(spec, res.weights, images, size)
    else:
        masks, fallback = [], 0
        for img in images:
            m, found = threshold_mask(img, cfg)
            fallback += not found
            masks.append(m)
        if fallback:
            log.warning("%d of %d images had no pixel above the segmentation threshold; using full masks",
                        fallback, len(images))
    rows = []
    for r, m in zip(src.rows, masks):
        path = out_dir / "masks" / f"{r.image_id}_mask.png"
        imaging.save_mask(m, path)
        rows.append(dataset.DatasetRow(r.image_id, r.path, r.class_id, r.split, str(path)))
    dataset.DatasetManifest(rows).save(run.manifest("segment"))
    log.info("segmented %d images with %s", len(rows), cfg.segmenter)
    return 0


def cmd_augment(args, cfg: RunConfig, run: RunDir) -> int:
    src = dataset.DatasetManifest.load(run.require(run.manifest("segment"), "segment"))
    counts = {k: v for k, v in src.class_counts().items() if v > 0}
    absent = [k for k in CLASS_NAMES if k not in counts]
    if absent:
        log.warning("classes absent from the dataset and left out of balancing: %s", ", ".join(absent))
    plan = augmentation.plan_balance(counts, cfg.balance_target, cfg.seed, cfg.augment_ranges)
    source = {name: [] for name in counts}
    for r in src.rows:
        source[r.class_name].append(augmentation.SourceImage(r.image_id, r.path, r.mask_path or None))
    rows = augmentation.execute_plan(plan, source, run.stage("augment") / "images", run.manifest("augment"))
    for cp in plan.classes:
        log.info("%s: %d sources, keep %d, synthesize %d", cp.name, cp.source_count, len(cp.keep), cp.synthesize)
    log.info("balanced manifest: %d rows", len(rows))
    return 0


def _training_inputs(run: RunDir, cfg: RunConfig) -> dataset.LazyInputs:
    return dataset.LazyInputs(samples_from_augment(run), cfg.model, cfg.use_mask)


def cmd_train(args, cfg: RunConfig, run: RunDir) -> int:
    data = _training_inputs(run, cfg)
    labels = data.labels
    tr, va = training.stratified_split(labels, cfg.train_fraction, cfg.seed, data.groups)
    spec = build_model(cfg.model, cfg.resolved_input_size)
    paths = data.paths()
    adam = training.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    res = training.fit(spec, [training.Subset(x, tr) for x in paths], labels[tr],
                       [training.Subset(x, va) for x in paths], labels[va],
                       cfg.resolved_epochs, cfg.seed, cfg.batch_size, adam)
    out = run.stage("train")
    save_weights(res.weights, out / "weights.slcw")
    report = single_report(spec.name, res.confusion, res.epoch_accuracies, res.epoch_losses, res.best_epoch, len(tr))
    write_report(report, out, figures=not args.no_figures)
    print(report.to_text(), end="")
    return 0


def cmd_crossval(args, cfg: RunConfig, run: RunDir) -> int:
    data = _training_inputs(run, cfg)
    labels = data.labels
    plan = training.make_stratified_folds(labels, cfg.folds, cfg.seed, data.groups)
    problems = plan.audit(data.groups)
    if problems:
        raise ValidationError("fold plan failed audit: " + "; ".join(problems))
    out = run.stage("crossval")
    report = training.cross_validate(lambda: build_model(cfg.model, cfg.resolved_input_size), data.paths(),
                                     labels, plan, cfg.resolved_epochs, cfg.seed, cfg.batch_size, cfg.lr,
                                     checkpoint_dir=out, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    best = int(np.argmax([f.accuracy for f in report.folds]))
    shutil.copyfile(out / f"fold{best}.slcw", out / "best.slcw")
    (out / "best.txt").write_text(f"fold={best}\naccuracy={report.folds[best].accuracy!r}\n")
    write_report(report, out, figures=not args.no_figures)
    print(report.to_json() if args.format == "json" else report.to_text(), end="")
    return 0


def cmd_evaluate(args, cfg: RunConfig, run: RunDir) -> int:
    src = dataset.DatasetManifest.load(run.require(run.manifest("segment"), "segment"))
    weights = load_weights(resolve_weights(run, args.weights))
    spec = build_model(cfg.model, cfg.resolved_input_size)
    data = dataset.LazyInputs(dataset.manifest_samples(src), cfg.model, cfg.use_mask)
    conf = training.evaluate(spec, weights, data.paths(), data.labels, cfg.batch_size)
    report = single_report(spec.name, conf)
    write_report(report, run.stage("evaluate"), figures=not args.no_figures)
    print(report.to_text(), end="")
    return 0


def predict_line(probs) -> str:
    return ",".join([CLASS_NAMES[int(np.argmax(probs))], *(f"{p:.6f}" for p in probs)])


def cmd_predict(args, cfg: RunConfig, run: RunDir) -> int:
    weights = load_weights(resolve_weights(run, args.weights))
    given = imaging.load_mask(args.mask) if args.mask else None
    img, mask = preprocess_image(imaging.load_image(args.image), cfg, given)
    if mask is None and dataset.needs_mask(cfg.model, cfg.use_mask):
        unet_path = run.stage("segment") / "unet.slcw"
        if cfg.segmenter == "unet":
            spec_u = segmentation.build_unet(cfg.unet_config)
            mask = unet_masks(spec_u, load_weights(run.require(unet_path, "segment")), [img],
                              cfg.resolved_input_size)[0]
        else:
            mask, _ = threshold_mask(img, cfg)
    spec = build_model(cfg.model, cfg.resolved_input_size)
    xs = [x[None] for x in dataset.network_input(img, mask, cfg.model, cfg.use_mask)]
    with no_grad():
        probs = forward(spec, weights, xs if len(xs) > 1 else xs[0]).data[0]
    print(predict_line(probs))
    return 0


def cmd_synth(args, cfg: RunConfig, run: RunDir | None) -> int:
    images, masks, labels = classification_dataset(args.per_class, args.size, args.seed)
    path = dataset.write_isic_layout(args.out, images, labels, masks)
    print(path)
    return 0


HANDLERS = {
    "ingest": cmd_ingest, "preprocess": cmd_preprocess, "segment": cmd_segment, "augment": cmd_augment,
    "train": cmd_train, "crossval": cmd_crossval, "evaluate": cmd_evaluate, "predict": cmd_predict,
}


# --- argument parsing --------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key = value config file; flags below override it")
    g.add_argument("--workdir", default="runs", help="parent of run directories (default: runs)")
    g.add_argument("--run-dir", help="explicit run directory instead of the config-hash name")
    g.add_argument("--seed", type=int)
    g.add_argument("--model", choices=("m1", "m2-one", "m2-dual"))
    g.add_argument("--folds", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--input-size", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--segmenter", choices=("threshold", "unet"))
    g.add_argument("--balance-target", type=int)
    g.add_argument("--use-mask", action="store_true", default=None, help="m1: multiply by the lesion mask")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="skinlesion", description="Skin-lesion classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate an ISIC-layout labels CSV and image folder")
    p.add_argument("--labels", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", help="folder of <id>_mask.png ground-truth masks")
    sub.add_parser("preprocess", parents=[common], help="crop, colour-normalise and resize")
    sub.add_parser("segment", parents=[common], help="lesion masks (threshold or U-Net)")
    sub.add_parser("augment", parents=[common], help="balance classes to the target count")
    for name in ("train", "crossval", "evaluate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
        if name == "crossval":
            p.add_argument("--format", choices=("json", "text"), default="json", help="stdout format")
        if name == "evaluate":
            p.add_argument("--weights")
    p = sub.add_parser("predict", parents=[common], help="classify one image")
    p.add_argument("image")
    p.add_argument("--mask", help="use this mask instead of segmenting")
    p.add_argument("--weights")
    p = sub.add_parser("synth", help="write a synthetic ISIC-layout dataset")
    p.add_argument("out")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


_FLAG_KEYS = ("seed", "model", "folds", "epochs", "input_size", "batch_size", "lr", "segmenter",
              "balance_target", "use_mask")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None}
    cfg = cfg.replace(**overrides)
    if args.set:
        cfg = RunConfig.from_text("\n".join(args.set), base=cfg)
    return cfg


def _report_error(stage: str, exc: BaseException) -> None:
    record = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, MissingArtifactError):
        record["path"] = exc.path
    print(json.dumps(record), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.getLogger("skinlesion").setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger("skinlesion")
    root.addHandler(console)
    try:
        if args.command == "synth":
            return cmd_synth(args, RunConfig(), None)
        cfg = resolve_config(args)
        run = RunDir(Path(args.run_dir) if args.run_dir else Path(args.workdir) / cfg.run_dir_name())
        with run.locked():
            (run.root / "config.txt").write_text(cfg.to_text())
            with stage_log(run.stage(args.command) / f"{args.command}.log"):
                log.info("stage %s in %s", args.command, run.root)
                return HANDLERS[args.command](args, cfg, run)
    except (SkinLesionError, OSError, ValueError) as exc:
        _report_error(args.command, exc)
        return 1
    finally:
        root.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
