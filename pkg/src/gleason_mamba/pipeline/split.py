"""Patient-grouped train/val/test splits and class-balanced folds."""
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

_TOL = 1e-9


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    split: Dict[str, str]                      # patient_id -> train | val | test
    fold: Dict[str, Optional[int]] = field(default_factory=dict)
    seed: int = 0

    def apply(self, records):
        out = []
        for r in records:
            if r.patient_id not in self.split:
                raise SplitError(f"patient {r.patient_id!r} missing from the plan")
            out.append(r.with_assignment(self.split[r.patient_id], self.fold.get(r.patient_id)))
        return out

    def patients(self, split=None, fold=None):
        return sorted(p for p, s in self.split.items()
                      if (split is None or s == split) and (fold is None or self.fold.get(p) == fold))


def _patient_counts(records):
    counts = Counter(r.patient_id for r in records)
    if any(not p for p in counts):
        raise SplitError("every record needs a non-empty patient_id")
    return OrderedDict(sorted(counts.items()))


def _take_until(order, counts, target, keep_free):
    """Take patients from ``order`` until their patch total reaches ``target``,
    leaving at least ``keep_free`` patients behind."""
    taken, total = [], 0
    for p in order:
        if total >= target - _TOL or len(order) - len(taken) <= keep_free:
            break
        taken.append(p)
        total += counts[p]
    return taken


def _hold_out_test(counts, test_frac, rng):
    order = [str(p) for p in rng.permutation(list(counts))]
    total = sum(counts.values())
    test = _take_until(order, counts, test_frac * total, keep_free=1) if test_frac > 0 else []
    rest = [p for p in order if p not in set(test)]
    return test, rest


def split_by_patient(records, test_frac=0.2, val_frac=0.1, seed=0):
    """Shuffle patients with ``seed``; fill test until ``test_frac`` of all
    patches is covered, then val until ``val_frac`` of the remaining patches;
    everyone else trains. Every split holds whole patients."""
    counts = _patient_counts(records)
    if len(counts) < 2:
        raise SplitError(f"need at least 2 patients for disjoint splits, got {len(counts)}")
    rng = np.random.default_rng(seed)
    test, rest = _hold_out_test(counts, test_frac, rng)
    remaining = sum(counts[p] for p in rest)
    val = _take_until(rest, counts, val_frac * remaining, keep_free=1) if val_frac > 0 else []
    plan = {p: "train" for p in counts}
    plan.update((p, "test") for p in test)
    plan.update((p, "val") for p in val)
    return SplitPlan(split=plan, fold={p: None for p in counts}, seed=seed)


def _class_vectors(records, patients, classes):
    index = {c: i for i, c in enumerate(classes)}
    vec = {p: np.zeros(len(classes)) for p in patients}
    for r in records:
        if r.patient_id in vec:
            vec[r.patient_id][index[r.label]] += 1
    return vec


def fold_cost(fold_counts, target):
    """Sum of squared per-class deviations of every fold from the per-fold target."""
    return float(((np.asarray(fold_counts) - target) ** 2).sum())


def assign_folds(records, k=4, seed=0, test_frac=0.2, classes=None):
    """Hold out a test subset of whole patients, then place the rest in ``k`` folds.

    Patients go in descending patch-count order (seeded shuffle breaks
    ties) to the fold whose squared per-class deviation from the per-fold
    target grows least; ties prefer the fold with fewer patients, then the
    lower index. Pairwise patient swaps between folds then run until none
    lowers ``fold_cost``. Fold members get ``split="train"`` and ``fold``
    1..k.
    """
    counts = _patient_counts(records)
    if len(counts) < k:
        raise SplitError(f"{len(counts)} patients cannot fill {k} folds")
    if classes is None:
        classes = sorted({r.label for r in records})
    rng = np.random.default_rng(seed)
    test, rest = _hold_out_test(counts, test_frac, rng) if test_frac > 0 else ([], list(counts))
    if len(rest) < k:
        # keep the folds populated: shrink the test subset
        test, rest = test[: len(counts) - k], test[len(counts) - k:] + rest
    vec = _class_vectors(records, rest, classes)
    jitter = rng.permutation(len(rest))
    order = [p for _, _, p in sorted(zip([-counts[p] for p in rest], jitter, rest))]
    target = sum(vec[p] for p in rest) / k
    folds = np.zeros((k, len(classes)))
    members = [0] * k
    fold_of = {}
    for p in order:
        v = vec[p]
        delta = (v * (2 * (folds - target) + v)).sum(axis=1)
        best = min(range(k), key=lambda f: (delta[f], members[f], f))
        folds[best] += v
        members[best] += 1
        fold_of[p] = best
    _refine_by_swaps(order, vec, fold_of, folds, target)
    fold_of = {p: f + 1 for p, f in fold_of.items()}
    plan = {p: "train" for p in counts}
    plan.update((p, "test") for p in test)
    return SplitPlan(split=plan, fold={p: fold_of.get(p) for p in counts}, seed=seed)


def _refine_by_swaps(order, vec, fold_of, folds, target, max_passes=50):
    """Swap patients between folds while any swap lowers the total cost (in place)."""
    for _ in range(max_passes):
        improved = False
        for i, p in enumerate(order):
            for q in order[i + 1:]:
                a, b = fold_of[p], fold_of[q]
                if a == b:
                    continue
                d = vec[q] - vec[p]
                # cost change of folds[a] += d, folds[b] -= d
                gain = (d * (2 * (folds[a] - target) + d)).sum() + (d * (-2 * (folds[b] - target) + d)).sum()
                if gain < -1e-9:
                    folds[a] += d
                    folds[b] -= d
                    fold_of[p], fold_of[q] = b, a
                    improved = True
        if not improved:
            return


def split_support(records, classes):
    """``{split_name: {class: count}}`` for printing."""
    table = {}
    for r in records:
        key = r.split if r.fold is None else f"{r.split}/fold{r.fold}"
        row = table.setdefault(key, {c: 0 for c in classes})
        row[r.label] = row.get(r.label, 0) + 1
    return dict(sorted(table.items()))
