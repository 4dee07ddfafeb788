"""Point-cloud data model: normalized clouds, masks, labelings, neighbor
queries, and the plain-text interchange formats.

Clouds are normalized at ingestion (centroid to the origin, then scaled so
the farthest point sits on the unit sphere) and immutable afterward. All
neighborhood queries are brute force; nothing here exceeds a few thousand
points.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NormalizeTransform",
    "PointCloud",
    "BinaryMask",
    "KWayLabeling",
    "ShapeSet",
    "normalize_points",
    "load_pointcloud",
    "save_pointcloud",
    "save_labeling",
    "load_labeling",
    "radius_neighbors",
    "knn",
]

MIN_POINTS = 8
_CENTROID_TOL = 1e-6
_RADIUS_TOL = 1.0 + 1e-6


@dataclass(frozen=True)
class NormalizeTransform:
    """Centering offset and scale divisor applied at ingestion.

    Kept so downstream labelings stay index-aligned with the original file
    and so outputs can be mapped back to source coordinates.
    """

    offset: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.offset) / self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + self.offset


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3) float64, normalized
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be (n, 3), got {pts.shape}")
        if pts.shape[0] < MIN_POINTS:
            raise ValueError(f"point cloud needs >= {MIN_POINTS} points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        centroid = pts.mean(axis=0)
        if np.abs(centroid).max() > _CENTROID_TOL:
            raise ValueError(f"cloud not centered: centroid {centroid}")
        radii = np.linalg.norm(pts, axis=1)
        if radii.max() > _RADIUS_TOL:
            raise ValueError(f"cloud not unit-scaled: max radius {radii.max()}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def normalize_points(raw: np.ndarray) -> tuple[np.ndarray, NormalizeTransform]:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    raw = np.asarray(raw, dtype=np.float64)
    centroid = raw.mean(axis=0)
    centered = raw - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale < 1e-12:
        raise ValueError("degenerate cloud: all points coincide")
    return centered / scale, NormalizeTransform(offset=centroid, scale=scale)


@dataclass(frozen=True)
class BinaryMask:
    """Per-point foreground flags, index-aligned with the owning cloud."""

    flags: np.ndarray  # (n,) bool

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        f.setflags(write=False)
        object.__setattr__(self, "flags", f)

    def foreground_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def background_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.flags)

    def check_for(self, cloud: PointCloud) -> None:
        if len(self.flags) != cloud.n_points:
            raise ValueError(
                f"mask length {len(self.flags)} != cloud size {cloud.n_points}"
            )


@dataclass(frozen=True)
class KWayLabeling:
    """Per-point integer labels in [0, k_bound); k_bound is an upper bound,
    not a promise that every label is used."""

    labels: np.ndarray  # (n,) int
    k_bound: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.ndim != 1:
            raise ValueError("labels must be 1-D")
        if self.k_bound < 1:
            raise ValueError("k_bound must be >= 1")
        if lab.size and (lab.min() < 0 or lab.max() >= self.k_bound):
            raise ValueError(
                f"labels must lie in [0, {self.k_bound}), got range "
                f"[{lab.min()}, {lab.max()}]"
            )
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def labels_used(self) -> set[int]:
        return set(int(v) for v in np.unique(self.labels))

    def check_for(self, cloud: PointCloud) -> None:
        if len(self.labels) != cloud.n_points:
            raise ValueError(
                f"labeling length {len(self.labels)} != cloud size {cloud.n_points}"
            )


@dataclass
class ShapeSet:
    """The set of shapes jointly segmented; ground truth rides along only for
    evaluation and is never visible to the optimization."""

    shapes: list[PointCloud]
    ground_truth: list[KWayLabeling] | None = field(default=None)

    def __post_init__(self):
        if len(self.shapes) < 2:
            raise ValueError("a shape set needs at least 2 shapes")
        if self.ground_truth is not None:
            if len(self.ground_truth) != len(self.shapes):
                raise ValueError("ground truth count != shape count")
            for cloud, gt in zip(self.shapes, self.ground_truth):
                gt.check_for(cloud)

    def __len__(self) -> int:
        return len(self.shapes)


# ---------------------------------------------------------------------------
# text I/O


def load_pointcloud(path: str | os.PathLike) -> tuple[PointCloud, NormalizeTransform]:
    """Read an XYZ text file (three floats per non-empty line) and normalize.

    Malformed lines are reported with their 1-based line number.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            fields = stripped.split()
            if len(fields) != 3:
                raise ValueError(
                    f"{path}: line {lineno}: expected 3 fields, got {len(fields)}"
                )
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
    if len(rows) < MIN_POINTS:
        raise ValueError(f"{path}: needs >= {MIN_POINTS} points, got {len(rows)}")
    pts, transform = normalize_points(np.array(rows))
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return PointCloud(points=pts, id=name), transform


def save_pointcloud(cloud: PointCloud, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def save_labeling(labeling: KWayLabeling, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for v in labeling.labels:
            fh.write(f"{int(v)}\n")


def load_labeling(path: str | os.PathLike, k_bound: int | None = None) -> KWayLabeling:
    """Read one integer label per line. k_bound defaults to max(label) + 1."""
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                v = int(stripped)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: not an integer") from None
            if v < 0:
                raise ValueError(f"{path}: line {lineno}: negative label {v}")
            vals.append(v)
    labels = np.array(vals, dtype=np.int64)
    if k_bound is None:
        k_bound = int(labels.max()) + 1 if labels.size else 1
    return KWayLabeling(labels=labels, k_bound=k_bound)


# ---------------------------------------------------------------------------
# neighborhood queries

def _sorted_by_distance(cloud: PointCloud, center_index: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.linalg.norm(cloud.points - cloud.points[center_index], axis=1)
    order = np.lexsort((np.arange(len(d)), d))  # distance, then index
    return d, order


def radius_neighbors(cloud: PointCloud, center_index: int, radius: float) -> np.ndarray:
    """All point indices within Euclidean ``radius`` of the center, inclusive,
    sorted by (distance, index). The center itself is always element 0."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    d, order = _sorted_by_distance(cloud, center_index)
    return order[d[order] <= radius]


def knn(cloud: PointCloud, center_index: int, k: int) -> np.ndarray:
    """The k nearest points to the center (center included, distance 0),
    ties broken by lower index."""
    if not 1 <= k <= cloud.n_points:
        raise ValueError(f"k must be in [1, {cloud.n_points}], got {k}")
    _, order = _sorted_by_distance(cloud, center_index)
    return order[:k]
