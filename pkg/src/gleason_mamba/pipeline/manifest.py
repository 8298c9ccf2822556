"""CSV manifests, patient maps and PNG patch crops."""
import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .extract import PatchRecord

MANIFEST_FIELDS = ("patch_id", "patient_id", "image_id", "x", "y", "label", "split", "fold")
LABELS = ("benign", "g3", "g4", "g5")


class ManifestError(ValueError):
    pass


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.patch_id, r.patient_id, r.image_id, r.x, r.y, r.label, r.split,
                        "" if r.fold is None else r.fold])


def read_manifest(path, require_split=False):
    """Parse a manifest. ``split`` and ``fold`` may be blank (pre-labelled patch lists)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = set(MANIFEST_FIELDS[:6])
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise ManifestError(
                f"{path}: header must contain {', '.join(MANIFEST_FIELDS)}; got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip()
            if label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            try:
                x, y = int(row["x"]), int(row["y"])
                fold = int(row["fold"]) if row.get("fold") else None
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            split = (row.get("split") or "").strip()
            if split not in ("", "train", "val", "test"):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if require_split and not split:
                raise ManifestError(f"{path}:{lineno}: split column is empty")
            records.append(PatchRecord(row["patch_id"], row["patient_id"], row["image_id"],
                                       x, y, label, split, fold))
    return records


def read_patient_map(path):
    """``image_id,patient_id`` CSV -> dict."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "patient_id"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: header must be image_id,patient_id")
        return {row["image_id"]: row["patient_id"] for row in reader}


def save_crop(path, rgb, x, y, patch):
    crop = np.ascontiguousarray(rgb[y:y + patch, x:x + patch])
    Image.fromarray(crop, mode="RGB").save(path, optimize=False)


def load_rgb(path):
    with Image.open(path) as img:
        return np.array(img.convert("RGB"))


def load_patches(directory, records, size):
    """Load ``<patch_id>.png`` crops as float images ``(n, 3, size, size)`` in [0, 1].

    Crops larger than ``size`` are block-averaged by an integer factor.
    """
    directory = Path(directory)
    out = np.empty((len(records), 3, size, size))
    for i, r in enumerate(records):
        path = directory / f"{r.patch_id}.png"
        if not path.exists():
            raise ManifestError(f"missing patch image {path}")
        img = load_rgb(path).astype(np.float64) / 255.0
        h, w = img.shape[:2]
        if h != w or h % size:
            raise ManifestError(f"{path}: {w}x{h} crop cannot be reduced to {size}x{size}")
        f = h // size
        img = img.reshape(size, f, size, f, 3).mean(axis=(1, 3))
        out[i] = img.transpose(2, 0, 1)
    return out
