"""Sliding-window patch extraction with central-core labelling."""
import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .annotations import AMBIGUOUS, BACKGROUND, CODE_TO_LABEL

log = logging.getLogger(__name__)

DISCARD = None
PATCH = 512
STRIDE = 256
CORE = 250


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    patient_id: str
    image_id: str
    x: int
    y: int
    label: str
    split: str = ""
    fold: Optional[int] = None

    def with_assignment(self, split, fold=None):
        return replace(self, split=split, fold=fold)


def enumerate_grid(width, height, patch=PATCH, stride=STRIDE):
    """Top-left corners ``(x, y)`` of every window that fits, rows outer, x inner."""
    if width < patch or height < patch:
        warnings.warn(f"image {width}x{height} is smaller than the {patch}px patch; no positions")
        return []
    xs = range(0, width - patch + 1, stride)
    ys = range(0, height - patch + 1, stride)
    return [(x, y) for y in ys for x in xs]


def core_offset(patch=PATCH, core=CORE):
    if core > patch:
        raise ValueError(f"core {core} exceeds patch {patch}")
    return (patch - core) // 2


def assign_label(consensus, x, y, patch=PATCH, core=CORE):
    """Label name of the patch at ``(x, y)`` or ``None`` (discard).

    Kept only when every pixel of the centred ``core x core`` square carries
    the same code and that code is neither background nor ambiguous.
    """
    H, W = consensus.shape
    if x < 0 or y < 0 or x + patch > W or y + patch > H:
        raise ValueError(f"patch at ({x}, {y}) size {patch} falls outside {W}x{H}")
    off = core_offset(patch, core)
    region = consensus[y + off:y + off + core, x + off:x + off + core]
    code = int(region.flat[0])
    if code in (BACKGROUND, AMBIGUOUS) or code not in CODE_TO_LABEL:
        return DISCARD
    if region.min() != code or region.max() != code:
        return DISCARD
    return CODE_TO_LABEL[code]


def patch_id_for(image_id, x, y):
    return f"{image_id}_x{x:05d}_y{y:05d}"


@dataclass
class ExtractionResult:
    records: list
    discarded: int
    grid_size: int


def extract_image(consensus, image_id, patient_id, patch=PATCH, stride=STRIDE, core=CORE):
    """Label every grid window of one consensus map; ``grid_size = kept + discarded``."""
    H, W = consensus.shape
    grid = enumerate_grid(W, H, patch, stride)
    kept = []
    for x, y in grid:
        label = assign_label(consensus, x, y, patch, core)
        if label is not DISCARD:
            kept.append(PatchRecord(patch_id_for(image_id, x, y), patient_id, image_id, x, y, label))
    log.debug("%s: %d kept / %d windows", image_id, len(kept), len(grid))
    return ExtractionResult(kept, len(grid) - len(kept), len(grid))


def sort_records(records):
    return sorted(records, key=lambda r: (r.image_id, r.y, r.x))
