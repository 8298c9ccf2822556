"""``gleason-mamba`` command line: extract, split, train, eval, synth, shapes.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .core.serialize import CheckpointError, load_checkpoint, save_checkpoint
from .medmamba import CLASS_NAMES, ConfigError, MedMamba, ModelConfig, TrainConfig, TrainingDiverged, fit
from .medmamba.synthetic import make_textures, to_uint8
from .medmamba.train import predict
from .pipeline import (
    AnnotationError,
    ManifestError,
    PatchRecord,
    SplitError,
    assign_folds,
    extract_image,
    load_experts,
    majority_vote,
    read_manifest,
    read_patient_map,
    sort_records,
    split_by_patient,
    split_support,
    write_manifest,
)
from .pipeline.manifest import load_patches, load_rgb, save_crop

log = logging.getLogger("gleason_mamba")

DEFAULTS = {
    "extract": {"patch_size": 512, "stride": 256, "core": 250},
    "split": {"test_frac": 0.2, "val_frac": 0.1, "folds": None, "seed": 0},
    "train": {"seed": 0, "model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(),
              "data": {"mean": 0.5, "std": 0.25}},
    "eval": {},
    "synth": {"n_train": 2000, "n_val": 400, "n_test": 400, "size": 32, "seed": 0,
              "patches_per_patient": 10},
}


class InputError(Exception):
    """Bad user input; exit code 2."""


def _configure_logging():
    level = os.environ.get("GLEASON_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(command, args, flag_keys):
    """Defaults <- JSON file (``--config``) <- explicitly given flags."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _dump_config(path, cfg):
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return repr(float(v))


# ---------------------------------------------------------------- extract


def cmd_extract(args):
    cfg = resolve_config("extract", args, ["patch_size", "stride", "core"])
    ann_root = Path(args.annotations)
    img_root = Path(args.images)
    if not ann_root.is_dir():
        raise InputError(f"annotations directory not found: {ann_root}")
    image_dirs = sorted(p for p in ann_root.iterdir() if p.is_dir())
    if not image_dirs:
        raise InputError(f"annotations directory has no <image_id>/ subdirectories: {ann_root}")
    if not img_root.is_dir():
        raise InputError(f"images directory not found: {img_root}")
    patients = read_patient_map(args.patient_map) if args.patient_map else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.update(images=str(img_root), annotations=str(ann_root), patient_map=args.patient_map)

    P, S, core = cfg["patch_size"], cfg["stride"], cfg["core"]
    records, kept_by_class, discarded = [], {c: 0 for c in CLASS_NAMES}, 0
    for d in image_dirs:
        image_id = d.name
        img_path = img_root / f"{image_id}.png"
        try:
            rgb = load_rgb(img_path)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: cannot read image %s (%s)", image_id, img_path, exc)
            continue
        try:
            consensus = majority_vote(load_experts(d))
        except (AnnotationError, OSError) as exc:
            log.warning("skipping %s: %s", image_id, exc)
            continue
        if consensus.shape != rgb.shape[:2]:
            log.warning("skipping %s: annotation %s vs image %s", image_id, consensus.shape, rgb.shape[:2])
            continue
        res = extract_image(consensus, image_id, patients.get(image_id, image_id), P, S, core)
        discarded += res.discarded
        for r in res.records:
            save_crop(out / f"{r.patch_id}.png", rgb, r.x, r.y, P)
            kept_by_class[r.label] += 1
        records.extend(res.records)

    records = sort_records(records)
    write_manifest(out / "manifest.csv", records)
    _dump_config(out / "config.json", cfg)
    print(f"kept {len(records)} patches, discarded {discarded}")
    for c, n in kept_by_class.items():
        print(f"  {c:7s} {n}")
    if not records:
        log.error("no patches kept")
        return 1
    return 0


# ------------------------------------------------------------------ split


def cmd_split(args):
    cfg = resolve_config("split", args, ["test_frac", "val_frac", "folds", "seed"])
    records = _read_manifest(args.manifest)
    try:
        if cfg["folds"]:
            plan = assign_folds(records, k=cfg["folds"], seed=cfg["seed"], test_frac=cfg["test_frac"],
                                classes=list(CLASS_NAMES))
        else:
            plan = split_by_patient(records, cfg["test_frac"], cfg["val_frac"], cfg["seed"])
    except SplitError as exc:
        raise InputError(str(exc)) from None
    records = plan.apply(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out, records)
    cfg["manifest"] = str(args.manifest)
    _dump_config(out.with_suffix(".config.json"), cfg)
    table = split_support(records, CLASS_NAMES)
    print("split".ljust(16) + "".join(c.rjust(8) for c in CLASS_NAMES) + "total".rjust(8))
    for name, row in table.items():
        print(name.ljust(16) + "".join(str(row[c]).rjust(8) for c in CLASS_NAMES)
              + str(sum(row.values())).rjust(8))
    return 0


def _read_manifest(path, require_split=False):
    try:
        return read_manifest(path, require_split=require_split)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except ManifestError as exc:
        raise InputError(str(exc)) from None


# ------------------------------------------------------------------ train


def _load_split(records, split, patches_dir, size, data_cfg):
    rows = [r for r in records if r.split == split]
    try:
        X = load_patches(patches_dir, rows, size)
    except ManifestError as exc:
        raise InputError(str(exc)) from None
    X = (X - data_cfg["mean"]) / data_cfg["std"]
    y = np.array([CLASS_NAMES.index(r.label) for r in rows], dtype=np.int64)
    return rows, X, y


def cmd_train(args):
    cfg = resolve_config("train", args, ["seed"])
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    cfg["train"]["seed"] = cfg["seed"]
    try:
        model_cfg = ModelConfig(**cfg["model"])
        train_cfg = TrainConfig(**cfg["train"])
    except (TypeError, ConfigError) as exc:
        raise InputError(f"invalid training config: {exc}") from None
    if model_cfg.input_size[0] != model_cfg.input_size[1]:
        raise InputError("patch loader needs a square input size")
    records = _read_manifest(args.manifest, require_split=True)
    patches = Path(args.patches) if args.patches else Path(args.manifest).parent
    size = model_cfg.input_size[0]
    _, Xtr, ytr = _load_split(records, "train", patches, size, cfg["data"])
    _, Xva, yva = _load_split(records, "val", patches, size, cfg["data"])
    if len(Xtr) == 0:
        raise InputError(f"{args.manifest}: no rows with split=train")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    cfg.update(manifest=str(args.manifest), patches=str(patches), checkpoint=str(ckpt))
    _dump_config(out / "config.json", cfg)

    model = MedMamba(model_cfg, seed=cfg["seed"])
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        fh.flush()

        def on_epoch(row):
            writer.writerow([row["epoch"], _fmt(row["train_loss"]), _fmt(row["train_acc"]),
                             _fmt(row["val_loss"]), _fmt(row["val_acc"])])
            fh.flush()
            print(f"epoch {row['epoch']}: train_loss={row['train_loss']:.4f} "
                  f"train_acc={row['train_acc']:.4f} val_acc={row['val_acc']:.4f}")

        try:
            fit(model, (Xtr, ytr), (Xva, yva) if len(Xva) else None, train_cfg, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            log.error("%s", exc)
            return 1
    meta = {"model": model_cfg.to_dict(), "data": cfg["data"], "classes": list(CLASS_NAMES),
            "train": train_cfg.to_dict()}
    save_checkpoint(ckpt, model.state_dict(), meta)
    return 0


# ------------------------------------------------------------------- eval


def _read_predictions(path, classes):
    preds = {}
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise InputError(f"prediction file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patch_id", "predicted_label"} <= set(reader.fieldnames):
            raise InputError(f"{path}: header must be patch_id,predicted_label")
        for lineno, row in enumerate(reader, start=2):
            label = (row["predicted_label"] or "").strip()
            if label not in classes:
                raise InputError(f"{path}:{lineno}: unknown label {label!r} for patch {row['patch_id']!r}")
            preds[row["patch_id"]] = label
    return preds


def cmd_eval(args):
    cfg = resolve_config("eval", args, [])
    records = _read_manifest(args.manifest, require_split=True)
    test = [r for r in records if r.split == "test"]
    if not test:
        raise InputError(f"{args.manifest}: test split is empty")
    if bool(args.checkpoint) == bool(args.pred_csv):
        raise InputError("give exactly one of --checkpoint or --pred-csv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.pred_csv:
        preds = _read_predictions(args.pred_csv, CLASS_NAMES)
        missing = [r.patch_id for r in test if r.patch_id not in preds]
        if missing:
            shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
            raise InputError(f"{len(missing)} test patches have no prediction: {shown}")
        predicted = [preds[r.patch_id] for r in test]
        cfg["source"] = {"pred_csv": str(args.pred_csv)}
    else:
        try:
            state, meta = load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise InputError(f"checkpoint not found: {args.checkpoint}") from None
        except CheckpointError as exc:
            raise InputError(str(exc)) from None
        model = MedMamba(ModelConfig(**meta["model"]))
        model.load_state_dict(state)
        patches = Path(args.patches) if args.patches else Path(args.manifest).parent
        _, X, _ = _load_split(records, "test", patches, model.config.input_size[0], meta["data"])
        logits = predict(model, X)
        if not np.all(np.isfinite(logits)):
            log.error("model produced non-finite logits")
            return 1
        predicted = [CLASS_NAMES[i] for i in logits.argmax(axis=1)]
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patch_id", "predicted_label"])
            w.writerows((r.patch_id, p) for r, p in zip(test, predicted))
        cfg["source"] = {"checkpoint": str(args.checkpoint), "patches": str(patches)}

    report, cm = metrics.score(predicted, [r.label for r in test], CLASS_NAMES)
    metrics.write_report(out, report, cm)
    cfg["manifest"] = str(args.manifest)
    _dump_config(out / "config.json", cfg)
    w = report["weighted"]
    print(f"n={report['n_samples']} precision={w['weighted_precision']:.4f} "
          f"recall={w['weighted_recall']:.4f} f1={w['weighted_f1']:.4f} "
          f"accuracy={report['overall_accuracy']:.4f}")
    return 0


# ------------------------------------------------------------------ synth


def cmd_synth(args):
    """Write the seeded texture set as crops plus a split manifest."""
    cfg = resolve_config("synth", args, ["n_train", "n_val", "n_test", "seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    for k, split in enumerate(("train", "val", "test")):
        n = cfg[f"n_{split}"]
        if n <= 0:
            continue
        X, y = make_textures(n, cfg["size"], seed=cfg["seed"] * 3 + k)
        imgs = to_uint8(X)
        for i in range(n):
            pid = f"{split}{i:05d}"
            Image.fromarray(imgs[i], mode="RGB").save(out / f"{pid}.png")
            patient = f"P{(offset + i) // cfg['patches_per_patient']:05d}"
            records.append(PatchRecord(pid, patient, pid, 0, 0, CLASS_NAMES[y[i]], split, None))
        offset += n
    write_manifest(out / "manifest.csv", records)
    _dump_config(out / "config.json", cfg)
    print(f"wrote {len(records)} patches to {out}")
    return 0


def cmd_shapes(args):
    cfg = resolve_config("train", args, [])
    try:
        model_cfg = ModelConfig(**cfg["model"])
    except (TypeError, ConfigError) as exc:
        raise InputError(f"invalid model config: {exc}") from None
    for name, shape in model_cfg.shape_trace(batch=args.batch):
        print(f"{name:20s} {shape}")
    return 0


# ------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="gleason-mamba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="consensus maps -> labelled patch crops + manifest")
    e.add_argument("--images", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--patient-map")
    e.add_argument("--out", required=True)
    e.add_argument("--patch-size", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--core", type=int)
    e.add_argument("--config")
    e.set_defaults(func=cmd_extract)

    s = sub.add_parser("split", help="patient-grouped train/val/test or k-fold assignment")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-frac", type=float)
    s.add_argument("--val-frac", type=float)
    s.add_argument("--folds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train MedMamba on the train/val splits")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint")
    t.add_argument("--patches")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="score the test split from a checkpoint or a prediction CSV")
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--pred-csv")
    v.add_argument("--patches")
    v.add_argument("--config")
    v.set_defaults(func=cmd_eval)

    y = sub.add_parser("synth", help="write the synthetic texture dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--n-train", type=int)
    y.add_argument("--n-val", type=int)
    y.add_argument("--n-test", type=int)
    y.add_argument("--seed", type=int)
    y.add_argument("--config")
    y.set_defaults(func=cmd_synth)

    h = sub.add_parser("shapes", help="print the model's shape trace")
    h.add_argument("--config")
    h.add_argument("--batch", type=int, default=1)
    h.set_defaults(func=cmd_shapes)
    return p


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
