"""Evaluation metrics: pairwise labeling agreement and the rank probe.

The agreement score is correspondence-free (it never needs to know which
abstract label matches which ground-truth label), which is what makes it
usable for co-segmentation output. Lower is better here: 0 means the two
labelings induce the same partition.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import KWayLabeling
from .linalg import second_singular_value

__all__ = [
    "ProbeRow",
    "RandIndexReport",
    "RankProbeReport",
    "map_labels_by_overlap",
    "rand_index",
    "rank_probe",
]


@dataclass(frozen=True)
class RandIndexReport:
    score: float  # in [0, 1], lower is better
    n_points: int
    pairs_agreeing: int

    def __post_init__(self):
        total = self.n_points * (self.n_points - 1) // 2
        if not 0 <= self.pairs_agreeing <= total:
            raise ValueError("pairs_agreeing out of range")
        # single division keeps exact rationals (e.g. 2/3) correctly rounded
        if self.score != (total - self.pairs_agreeing) / total:
            raise ValueError("score inconsistent with pair count")


def rand_index(pred: KWayLabeling, gt: KWayLabeling) -> RandIndexReport:
    """1 minus the fraction of point pairs the two labelings agree on.

    A pair agrees when both labelings put its points together or both split
    them. Computed from the label-pair contingency table in O(n + L^2) rather
    than enumerating the O(n^2) pairs.
    """
    a = np.asarray(pred.labels)
    b = np.asarray(gt.labels)
    if a.shape != b.shape:
        raise ValueError(f"labeling lengths differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")

    def pairs(counts: np.ndarray) -> int:
        c = counts.astype(np.int64)
        return int((c * (c - 1) // 2).sum())

    _, a_ids = np.unique(a, return_inverse=True)
    _, b_ids = np.unique(b, return_inverse=True)
    joint = np.zeros((a_ids.max() + 1, b_ids.max() + 1), dtype=np.int64)
    np.add.at(joint, (a_ids, b_ids), 1)

    total = n * (n - 1) // 2
    same_pred = pairs(joint.sum(axis=1))
    same_gt = pairs(joint.sum(axis=0))
    same_both = pairs(joint.reshape(-1))
    # pairs split by both labelings, via inclusion-exclusion
    split_both = total - same_pred - same_gt + same_both
    agreeing = same_both + split_both
    return RandIndexReport(
        score=(total - agreeing) / total, n_points=n, pairs_agreeing=agreeing
    )


def map_labels_by_overlap(pred: KWayLabeling, gt: KWayLabeling) -> dict[int, int]:
    """Best injective map from predicted labels to ground-truth labels,
    maximizing the number of points whose mapped label matches.

    Reporting aid only; the agreement score never needs it. Exhaustive over
    assignments, so both label vocabularies must stay small (<= 8).
    """
    a = np.asarray(pred.labels)
    b = np.asarray(gt.labels)
    if a.shape != b.shape:
        raise ValueError("labeling lengths differ")
    pred_labels = sorted(set(a.tolist()))
    gt_labels = sorted(set(b.tolist()))
    if len(pred_labels) > 8 or len(gt_labels) > 8:
        raise ValueError("label mapping supports at most 8 labels per side")

    overlap = {
        (p, g): int(((a == p) & (b == g)).sum())
        for p in pred_labels
        for g in gt_labels
    }
    if len(pred_labels) <= len(gt_labels):
        best, best_map = -1, {}
        for perm in itertools.permutations(gt_labels, len(pred_labels)):
            score = sum(overlap[(p, g)] for p, g in zip(pred_labels, perm))
            if score > best:
                best, best_map = score, dict(zip(pred_labels, perm))
        return best_map
    best, best_map = -1, {}
    for perm in itertools.permutations(pred_labels, len(gt_labels)):
        score = sum(overlap[(p, g)] for p, g in zip(perm, gt_labels))
        if score > best:
            best, best_map = score, dict(zip(perm, gt_labels))
    return best_map


@dataclass(frozen=True)
class ProbeRow:
    label_count: int
    sample_index: int
    sigma2_score: float
    mse_score: float

    def __post_init__(self):
        if self.sigma2_score < 0.0:
            raise ValueError("sigma2_score must be >= 0")


@dataclass
class RankProbeReport:
    rows: list[ProbeRow]
    skipped: list[str] = field(default_factory=list)

    def sigma2_summary(self) -> dict[int, tuple[float, float]]:
        return self._summary("sigma2_score")

    def mse_summary(self) -> dict[int, tuple[float, float]]:
        return self._summary("mse_score")

    def _summary(self, attr: str) -> dict[int, tuple[float, float]]:
        out: dict[int, tuple[float, float]] = {}
        for row in self.rows:
            v = getattr(row, attr)
            lo, hi = out.get(row.label_count, (v, v))
            out[row.label_count] = (min(lo, v), max(hi, v))
        return out


def _mse_spread(matrix: np.ndarray) -> float:
    center = matrix.mean(axis=0)
    return float(((matrix - center) ** 2).sum(axis=1).mean())


def rank_probe(parts: list[tuple[np.ndarray, int]],
               subset_sizes: tuple[int, ...] = (1, 2, 3),
               samples_per_subset: int = 50,
               seed: int = 0,
               collection_size: int = 24) -> RankProbeReport:
    """Score sampled descriptor collections by how many labels they mix.

    For each label subset of a requested size, draw collections of
    descriptors balanced across the subset's labels, stack them, and record
    the second singular value (the rank proxy) plus the mean-squared spread
    around the centroid (the naive baseline the proxy is compared against).
    Same seed, same report.
    """
    if samples_per_subset < 1 or collection_size < 1:
        raise ValueError("samples_per_subset and collection_size must be >= 1")
    pool: dict[int, list[np.ndarray]] = {}
    for desc, label in parts:
        arr = np.asarray(desc, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("each descriptor must be a 1-D vector")
        pool.setdefault(int(label), []).append(arr)
    labels = sorted(pool)
    if len(labels) < 3:
        raise ValueError("rank probe needs descriptors for >= 3 distinct labels")
    stacked = {lab: np.stack(pool[lab], axis=0) for lab in labels}

    rng = np.random.default_rng(seed)
    rows: list[ProbeRow] = []
    skipped: list[str] = []
    for size in subset_sizes:
        if size < 1 or size > len(labels):
            skipped.append(f"no label subset of size {size} (have {len(labels)} labels)")
            continue
        if collection_size < size:
            skipped.append(f"collection_size {collection_size} cannot cover {size} labels")
            continue
        for subset in itertools.combinations(labels, size):
            base, extra = divmod(collection_size, size)
            counts = [base + (1 if i < extra else 0) for i in range(size)]
            for sample_index in range(samples_per_subset):
                chunks = []
                for lab, count in zip(subset, counts):
                    src = stacked[lab]
                    idx = rng.integers(0, src.shape[0], size=count)
                    chunks.append(src[idx])
                collection = np.concatenate(chunks, axis=0)
                rows.append(ProbeRow(
                    label_count=size,
                    sample_index=sample_index,
                    sigma2_score=float(second_singular_value(collection).data),
                    mse_score=_mse_spread(collection),
                ))
    return RankProbeReport(rows=rows, skipped=skipped)
