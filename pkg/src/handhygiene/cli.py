"""Command line entry point: ingest, prepare, train, evaluate, predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import errors
from .config import PipelineConfig, load_config
from .evaluator import classification_report, confusion, write_report
from .ingest import (
    MANIFEST_NAME,
    ManifestWriter,
    ingest_session,
    manifest_from_class_dirs,
    probe_video,
    read_manifest,
)
from .model import extract_features, file_sha256, make_surrogate_weights
from .predictor import RollingWindow, export_predictions, rolling_predict
from .prep import (
    SPLIT_NAME,
    balance_classes,
    corpus_from_manifest,
    encode_labels,
    preprocess_batch,
    read_split,
    stratified_split,
    write_split,
)
from .trainer import build_classifier, export_curves, load_model, save_model, train

log = logging.getLogger("handhygiene")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv"}

VALIDATION_ERRORS = (
    errors.ConfigError,
    errors.ManifestError,
    errors.SplitError,
    errors.EncodingError,
    errors.LabelingError,
)


class ValidationFailure(Exception):
    pass


def _require(path, what: str) -> Path:
    if not path or not Path(path).exists():
        raise ValidationFailure(f"{what} not found: {path}")
    return Path(path)


def _prepare_run_dir(cfg: PipelineConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    return run_dir


def _load_images(root: Path, refs: list[str]) -> list[np.ndarray]:
    images = []
    for ref in refs:
        bgr = cv2.imread(str(root / ref), cv2.IMREAD_COLOR)
        if bgr is None:
            raise errors.ManifestError(f"missing or unreadable frame {root / ref}")
        images.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    return images


def _features(model, root: Path, refs: list[str], chunk: int = 64) -> torch.Tensor:
    """Backbone features for image files, loaded and preprocessed in chunks."""
    parts = []
    for start in range(0, len(refs), chunk):
        batch = preprocess_batch(_load_images(root, refs[start : start + chunk]), model.preprocess)
        parts.append(extract_features(model, batch))
    return torch.cat(parts) if parts else torch.zeros((0, 2048))


def _split_arrays(split_path: Path):
    train_c, val_c, spec, order = read_split(split_path)
    doc = json.loads(split_path.read_text())
    root = Path(doc["manifest_root"])
    return train_c, val_c, order, root


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    ing = cfg.ingest
    run_dir = _prepare_run_dir(cfg)
    corpus_dir = run_dir / "corpus"
    if ing.get("images_dir"):
        src = _require(ing["images_dir"], "images_dir")
        manifest = manifest_from_class_dirs(src, corpus_dir)
        print(f"indexed {len(manifest.rows)} frames into {corpus_dir / MANIFEST_NAME}")
        return EXIT_OK

    videos_dir = _require(ing.get("videos_dir"), "videos_dir")
    videos = sorted(p for p in videos_dir.iterdir() if p.suffix.lower() in VIDEO_SUFFIXES)
    if not videos:
        raise ValidationFailure(f"no session videos in {videos_dir}")

    writer = ManifestWriter(corpus_dir)
    report = {}
    for path in videos:
        video = probe_video(path)
        frames, result = ingest_session(
            video,
            sample_every=int(ing["sample_every"]),
            activity_threshold=float(ing["activity_threshold"]),
            min_pause_frames=ing["min_pause_frames"],
        )
        report[result.session] = result.to_json()
        if result.status == "labelled":
            writer.add(frames, {"fps": video.fps, "frames": result.frames}, session=result.session)
        log.info("%s: %s (%d activity segments)", result.session, result.status, result.activity_segments)
    manifest = writer.finish()
    (run_dir / "ingest_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    rejected = [s for s, r in report.items() if r["status"] != "labelled"]
    print(
        f"{len(videos) - len(rejected)} sessions labelled, {len(rejected)} rejected; "
        f"{len(manifest.rows)} frames in {corpus_dir / MANIFEST_NAME}"
    )
    for s in rejected:
        print(f"  rejected {s}: {report[s]['reason']}")
    return EXIT_OK


def cmd_prepare(cfg: PipelineConfig, args) -> int:
    run_dir = _prepare_run_dir(cfg)
    manifest_path = Path(args.manifest) if getattr(args, "manifest", None) else run_dir / "corpus" / MANIFEST_NAME
    _require(manifest_path, "manifest")
    manifest = read_manifest(manifest_path)
    corpus = corpus_from_manifest(manifest, cfg.classes)
    empty = [label.value for label, n in corpus.counts.items() if n == 0]
    if empty:
        raise ValidationFailure(f"no frames for classes: {', '.join(empty)}")
    balanced = balance_classes(corpus, cfg.balance_tolerance, cfg.seed)
    train_c, val_c = stratified_split(balanced, cfg.split_spec)
    out = write_split(
        run_dir / SPLIT_NAME, train_c, val_c, cfg.split_spec, cfg.classes,
        extra={"manifest_root": str(manifest.root.resolve())},
    )
    for label in cfg.classes:
        print(f"{label.value:<24} train {train_c.counts[label]:>6}  val {val_c.counts[label]:>6}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    run_dir = _prepare_run_dir(cfg)
    split_path = _require(run_dir / SPLIT_NAME, "split.json (run `prepare` first)")
    _require(cfg.backbone.weights_path, "backbone weights")
    train_c, val_c, order, root = _split_arrays(split_path)
    if order != cfg.classes:
        raise ValidationFailure("split.json class order differs from the configured classes")
    if cfg.backbone.weights_sha256 is None:
        log.warning("backbone weights are not pinned by checksum; recording %s", file_sha256(cfg.backbone.weights_path))

    model = build_classifier(cfg.backbone, cfg.head, cfg.preprocess)
    train_items, val_items = train_c.items(), val_c.items()
    x_train = _features(model, root, [ref for ref, _ in train_items])
    x_val = _features(model, root, [ref for ref, _ in val_items])
    y_train = encode_labels([label for _, label in train_items], order)
    y_val = encode_labels([label for _, label in val_items], order)
    model, history = train(model, (x_train, y_train), (x_val, y_val), cfg.train)
    save_model(model, history, run_dir / "model.pt")
    png, csv_path = export_curves(history, run_dir, "history")
    last = history.records[-1]
    print(
        f"{len(history.records)} epochs: train acc {last.train_accuracy:.4f}, "
        f"val acc {last.val_accuracy:.4f}, val loss {last.val_loss:.4f}"
    )
    print(f"wrote {run_dir / 'model.pt'}, {csv_path}, {png}")
    return EXIT_OK


def _model_path(cfg: PipelineConfig, args) -> Path:
    path = Path(args.model) if getattr(args, "model", None) else cfg.run_dir() / "model.pt"
    return _require(path, "model artifact")


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    model_path = _model_path(cfg, args)
    run_dir = _prepare_run_dir(cfg)
    split_path = _require(run_dir / SPLIT_NAME, "split.json (run `prepare` first)")
    model, _ = load_model(model_path, weights_path=cfg.backbone.weights_path)
    _, val_c, _, root = _split_arrays(split_path)
    order = model.class_order
    items = val_c.items()
    feats = _features(model, root, [ref for ref, _ in items])
    with torch.no_grad():
        probs = torch.softmax(model.head_logits(feats), dim=1).double().numpy()
    preds = [order[i] for i in np.argmax(probs, axis=1)]
    truths = [label for _, label in items]
    matrix = confusion(preds, truths, order)
    report = classification_report(matrix)
    out_dir = run_dir / "eval"
    js, txt = write_report(report, out_dir, title=f"Classification Report for {cfg.raw['experiment']}")
    matrix.to_csv(out_dir / "confusion.csv")
    print(txt.read_text(), end="")
    print(f"wrote {js}, {txt}, {out_dir / 'confusion.csv'}")
    return EXIT_OK


def cmd_predict(cfg: PipelineConfig, args) -> int:
    model_path = _model_path(cfg, args)
    video_path = _require(args.video, "video")
    model, _ = load_model(model_path, weights_path=cfg.backbone.weights_path)
    window = RollingWindow(args.window if args.window is not None else cfg.window)
    video = probe_video(video_path)
    events = rolling_predict(video, model, window, batch_size=int(cfg.raw["predict"]["batch_size"]))
    run_dir = _prepare_run_dir(cfg)
    out = Path(args.output) if args.output else run_dir / "predictions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_predictions(events, out, model.class_order)
    labels = [e.label for e in events]
    changes = sum(a != b for a, b in zip(labels, labels[1:]))
    print(f"{len(events)} frames, {changes} label changes; wrote {out}")
    return EXIT_OK


def cmd_make_weights(cfg: PipelineConfig, args) -> int:
    digest = make_surrogate_weights(args.path, seed=cfg.seed)
    print(f"{args.path} sha256 {digest}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "make-weights": cmd_make_weights,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file or preset name (set1, set2)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="handhygiene", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="segment session videos into a labelled frame corpus")
    p = sub.add_parser("prepare", parents=[common], help="balance classes and write the train/val split")
    p.add_argument("--manifest", help="manifest.csv to use instead of the run's own corpus")
    sub.add_parser("train", parents=[common], help="fine-tune the classifier head")
    p = sub.add_parser("evaluate", parents=[common], help="classification report on the validation split")
    p.add_argument("--model")
    p = sub.add_parser("predict", parents=[common], help="rolling-average predictions for one video")
    p.add_argument("--video", required=True)
    p.add_argument("--model")
    p.add_argument("--window", type=int)
    p.add_argument("--output")
    p = sub.add_parser("make-weights", parents=[common], help="write seeded stand-in backbone weights")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "seed", None), getattr(args, "out_dir", None))
        return COMMANDS[args.command](cfg, args)
    except (ValidationFailure, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except errors.HandHygieneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
