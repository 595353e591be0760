"""Patient-wise splitting and symptom-weighted sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Manifest, SampleRecord

PRNG_NAME = "PCG64"


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    test_ids: frozenset[str]
    labeled_ids: frozenset[str]
    unlabeled_fold_ids: tuple[frozenset[str], ...]
    seed: int

    def partitions(self) -> list[frozenset[str]]:
        return [self.test_ids, self.labeled_ids, *self.unlabeled_fold_ids]

    def check_disjoint(self, all_ids: Sequence[str] | None = None) -> None:
        """Raise SplitError if any patient sits in two partitions (or is missing)."""
        owner: dict[str, int] = {}
        for i, part in enumerate(self.partitions()):
            for pid in part:
                if pid in owner:
                    raise SplitError(f"patient {pid!r} in partitions {owner[pid]} and {i}")
                owner[pid] = i
        if all_ids is not None and set(all_ids) != set(owner):
            raise SplitError("split does not cover exactly the given patients")

    def cumulative_unlabeled(self, fold: int) -> frozenset[str]:
        return frozenset().union(*self.unlabeled_fold_ids[: fold + 1])

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "prng": PRNG_NAME,
            "test": sorted(self.test_ids),
            "labeled": sorted(self.labeled_ids),
            "unlabeled_folds": [sorted(f) for f in self.unlabeled_fold_ids],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPlan":
        return cls(frozenset(obj["test"]), frozenset(obj["labeled"]),
                   tuple(frozenset(f) for f in obj["unlabeled_folds"]), int(obj["seed"]))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def partition_sizes(n_patients: int, test_frac: float = 0.1, labeled_frac: float = 0.3,
                    n_folds: int = 3) -> tuple[int, int, list[int]]:
    """Partition sizes: floor for test, round-half-up for labeled, folds within 1 of each other."""
    n_test = int(Decimal(n_patients) * Decimal(str(test_frac)) // 1)
    pool = n_patients - n_test
    n_labeled = int((Decimal(pool) * Decimal(str(labeled_frac))).quantize(Decimal(1), ROUND_HALF_UP))
    rest = pool - n_labeled
    base, extra = divmod(rest, n_folds)
    # leftover patients go to the trailing folds, one each
    folds = [base + (1 if i >= n_folds - extra else 0) for i in range(n_folds)]
    return n_test, n_labeled, folds


def _stratified_order(ids: list[str], groups: dict[str, str], rng: np.random.Generator) -> list[str]:
    by_group: dict[str, list[str]] = {}
    for pid in ids:
        by_group.setdefault(groups[pid], []).append(pid)
    keyed = []
    for g in sorted(by_group):
        members = by_group[g]
        perm = rng.permutation(len(members))
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / len(members), g, members[j]))
    keyed.sort()
    return [pid for _, _, pid in keyed]


def make_split(m: Manifest, seed: int, test_frac: float = 0.1, labeled_frac: float = 0.3,
               n_folds: int = 3, stratify: bool = False) -> SplitPlan:
    ids = sorted(m.patients())
    if len(ids) < 10:
        raise SplitError(f"need at least 10 patients, found {len(ids)}")
    n_test, n_labeled, folds = partition_sizes(len(ids), test_frac, labeled_frac, n_folds)
    if n_test == 0 or n_labeled == 0 or min(folds) == 0:
        raise SplitError(f"too few patients ({len(ids)}) to populate every partition")
    rng = np.random.Generator(np.random.PCG64(seed))
    if stratify:
        first_disease = {}
        for r in m.records:
            first_disease.setdefault(r.patient_id, r.disease.value)
        order = _stratified_order(ids, first_disease, rng)
    else:
        order = [ids[i] for i in rng.permutation(len(ids))]
    cuts = np.cumsum([n_test, n_labeled, *folds])
    parts = np.split(np.array(order, dtype=object), cuts[:-1])
    plan = SplitPlan(frozenset(parts[0]), frozenset(parts[1]),
                     tuple(frozenset(p) for p in parts[2:]), seed)
    plan.check_disjoint(ids)
    return plan


def sampler_weights(records: Sequence[SampleRecord], positive_factor: float = 3.0) -> np.ndarray:
    """Per-record sampling weight: ``positive_factor`` if any symptom is positive, else 1."""
    return np.array([positive_factor if r.has_symptom else 1.0 for r in records], dtype=np.float64)


class WeightedSampler:
    """Draws record indices with replacement, proportional to their weights."""

    def __init__(self, weights: np.ndarray, rng: np.random.Generator):
        w = np.asarray(weights, dtype=np.float64)
        if len(w) == 0 or (w <= 0).any():
            raise ValueError("weights must be positive and nonempty")
        self.p = w / w.sum()
        self.rng = rng

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(len(self.p), size=n, replace=True, p=self.p)
