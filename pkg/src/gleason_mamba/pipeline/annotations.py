"""Expert annotation maps and pixel-level consensus."""
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

BACKGROUND = 0
AMBIGUOUS = 255
ALLOWED_CODES = (0, 1, 3, 4, 5)
CODE_TO_LABEL = {1: "benign", 3: "g3", 4: "g4", 5: "g5"}
LABEL_TO_CODE = {v: k for k, v in CODE_TO_LABEL.items()}

_EXPERT_FILE = re.compile(r"^expert_(\w+)\.png$")


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotationMap:
    labels: np.ndarray  # (H, W) uint8 codes
    expert_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise AnnotationError(f"annotation map must be 2-D, got shape {self.labels.shape}")
        bad = ~np.isin(self.labels, ALLOWED_CODES)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise AnnotationError(
                f"expert {self.expert_id!r}: pixel ({x}, {y}) has code {self.labels[y, x]}, "
                f"allowed {ALLOWED_CODES}")
        self.labels = self.labels.astype(np.uint8)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


def majority_vote(maps):
    """Per pixel, the code held by strictly more experts than any other code.

    Pixels where two or more codes tie for the most votes become
    :data:`AMBIGUOUS`.
    """
    if not maps:
        raise AnnotationError("majority vote needs at least one annotation map")
    shape = maps[0].labels.shape
    for m in maps[1:]:
        if m.labels.shape != shape:
            raise AnnotationError(
                f"expert {m.expert_id!r} map is {m.labels.shape}, expected {shape}")
    stack = np.stack([m.labels for m in maps])
    counts = np.stack([(stack == code).sum(axis=0, dtype=np.int32) for code in ALLOWED_CODES])
    best = counts.max(axis=0)
    n_best = (counts == best).sum(axis=0)
    winner = np.asarray(ALLOWED_CODES, dtype=np.uint8)[counts.argmax(axis=0)]
    return np.where(n_best == 1, winner, np.uint8(AMBIGUOUS)).astype(np.uint8)


def load_annotation(path, expert_id=""):
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise AnnotationError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
        return AnnotationMap(np.array(img), expert_id)


def load_experts(image_dir):
    """All ``expert_<k>.png`` maps in ``image_dir``, sorted by expert id."""
    image_dir = Path(image_dir)
    found = []
    for p in sorted(image_dir.iterdir()):
        m = _EXPERT_FILE.match(p.name)
        if m:
            found.append(load_annotation(p, m.group(1)))
    if not found:
        raise AnnotationError(f"{image_dir}: no expert_<k>.png files")
    return found


def save_annotation(path, labels):
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)
