from .annotations import (
    AMBIGUOUS,
    BACKGROUND,
    CODE_TO_LABEL,
    AnnotationError,
    AnnotationMap,
    load_experts,
    majority_vote,
)
from .extract import (
    CORE,
    PATCH,
    STRIDE,
    PatchRecord,
    assign_label,
    core_offset,
    enumerate_grid,
    extract_image,
    sort_records,
)
from .manifest import ManifestError, read_manifest, read_patient_map, write_manifest
from .split import SplitError, SplitPlan, assign_folds, split_by_patient, split_support

__all__ = [
    "AMBIGUOUS",
    "BACKGROUND",
    "CODE_TO_LABEL",
    "CORE",
    "PATCH",
    "STRIDE",
    "AnnotationError",
    "AnnotationMap",
    "ManifestError",
    "PatchRecord",
    "SplitError",
    "SplitPlan",
    "assign_folds",
    "assign_label",
    "core_offset",
    "enumerate_grid",
    "extract_image",
    "load_experts",
    "majority_vote",
    "read_manifest",
    "read_patient_map",
    "sort_records",
    "split_by_patient",
    "split_support",
    "write_manifest",
]
