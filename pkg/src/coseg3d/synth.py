"""Procedural shape generator and the mask-corruption process.

Shapes are unions of axis-aligned box surfaces, sampled uniformly by area,
with the generating primitive group as exact ground truth. Four families:
a two_box smoke-test pair, chairs (optional arms), tables, lamps. Shapes
drawn with different seeds differ in proportions, which is what makes joint
segmentation of a set non-trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BinaryMask, KWayLabeling, PointCloud, normalize_points

__all__ = [
    "SynthSpec",
    "CorruptionSpec",
    "synth_shape",
    "corrupt_mask",
    "FAMILY_LABELS",
]

FAMILIES = ("two_box", "chair_like", "table_like", "lamp_like")

# Label vocabulary per family; ground-truth k_bound is the vocabulary size.
FAMILY_LABELS = {
    "two_box": ("left", "right"),
    "chair_like": ("back", "seat", "legs", "arms"),
    "table_like": ("top", "legs"),
    "lamp_like": ("base", "pole", "shade"),
}


@dataclass(frozen=True)
class SynthSpec:
    family: str
    n_points: int = 512
    with_arms: bool = True  # chair_like only
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, want one of {FAMILIES}")
        if self.n_points < 64:
            raise ValueError("n_points must be >= 64")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class CorruptionSpec:
    insert_rate: float = 0.25
    delete_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("insert_rate", "delete_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5], got {v}")


@dataclass(frozen=True)
class _Box:
    center: np.ndarray  # (3,)
    half: np.ndarray  # (3,) half-extents
    label: int

    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half
        # pairs of faces normal to x, y, z
        return np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        areas = self.face_areas()
        faces = rng.choice(6, size=count, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(count, 3))
        pts = u * self.half
        axis = faces // 2  # which coordinate is pinned to a face
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        pts[np.arange(count), axis] = sign * self.half[axis]
        return pts + self.center


def _box(cx, cy, cz, hx, hy, hz, label) -> _Box:
    return _Box(np.array([cx, cy, cz], float), np.array([hx, hy, hz], float), label)


def _chair_boxes(rng: np.random.Generator, with_arms: bool) -> list[_Box]:
    # proportion draws: seat span, back height, leg length, member thickness
    w = rng.uniform(0.40, 0.52)   # seat half-width (x)
    dpt = rng.uniform(0.38, 0.50)  # seat half-depth (z)
    bh = rng.uniform(0.38, 0.55)   # back half-height
    ll = rng.uniform(0.30, 0.42)   # leg half-length
    th = rng.uniform(0.035, 0.06)  # thin-member half-thickness
    boxes = [
        _box(0.0, bh, -dpt + th, w, bh, th, 0),          # back slab
        _box(0.0, 0.0, 0.0, w, th, dpt, 1),              # seat slab
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            boxes.append(_box(sx * (w - th), -th - ll, sz * (dpt - th), th, ll, th, 2))
    if with_arms:
        ah = rng.uniform(0.18, 0.26)  # armrest height above seat
        for sx in (-1, 1):
            boxes.append(_box(sx * (w - th), ah, 0.0, th, th, dpt * 0.8, 3))
    return boxes


def _table_boxes(rng: np.random.Generator) -> list[_Box]:
    w = rng.uniform(0.45, 0.60)
    dpt = rng.uniform(0.30, 0.45)
    ll = rng.uniform(0.30, 0.45)
    th = rng.uniform(0.035, 0.06)
    boxes = [_box(0.0, 0.0, 0.0, w, th, dpt, 0)]
    for sx in (-1, 1):
        for sz in (-1, 1):
            boxes.append(_box(sx * (w - th), -th - ll, sz * (dpt - th), th, ll, th, 1))
    return boxes


def _lamp_boxes(rng: np.random.Generator) -> list[_Box]:
    base = rng.uniform(0.20, 0.30)
    pole = rng.uniform(0.35, 0.50)
    shade = rng.uniform(0.22, 0.34)
    th = rng.uniform(0.03, 0.05)
    return [
        _box(0.0, -pole - th, 0.0, base, th, base, 0),
        _box(0.0, 0.0, 0.0, th, pole, th, 1),
        _box(0.0, pole + 0.10, 0.0, shade, 0.10, shade, 2),
    ]


def _two_boxes(rng: np.random.Generator) -> list[_Box]:
    a = rng.uniform(0.25, 0.40)
    b = rng.uniform(0.20, 0.35)
    return [
        _box(-0.55, 0.0, 0.0, a, a * 0.8, a * 0.9, 0),
        _box(0.60, 0.05, 0.0, b, b, b, 1),
    ]


def _allocate(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of point counts proportional to area,
    with at least one point per primitive."""
    n = len(areas)
    if total < n:
        raise ValueError(f"cannot place {total} points on {n} primitives")
    ideal = areas / areas.sum() * (total - n)
    counts = np.floor(ideal).astype(int) + 1
    rem = ideal - np.floor(ideal)
    for j in np.argsort(-rem):
        if counts.sum() >= total:
            break
        counts[j] += 1
    # floor rounding can leave a small deficit; spread it over largest parts
    j = int(np.argmax(areas))
    counts[j] += total - counts.sum()
    return counts


def synth_shape(spec: SynthSpec) -> tuple[PointCloud, KWayLabeling]:
    """Generate one shape and its exact ground-truth labeling.

    Deterministic per spec: one RNG seeded from spec.seed drives proportions,
    surface sampling, and jitter in a fixed order.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.family == "two_box":
        boxes = _two_boxes(rng)
    elif spec.family == "chair_like":
        boxes = _chair_boxes(rng, spec.with_arms)
    elif spec.family == "table_like":
        boxes = _table_boxes(rng)
    else:
        boxes = _lamp_boxes(rng)

    areas = np.array([b.face_areas().sum() for b in boxes])
    counts = _allocate(areas, spec.n_points)
    pts = np.concatenate([b.sample_surface(c, rng) for b, c in zip(boxes, counts)])
    labels = np.concatenate([np.full(c, b.label) for b, c in zip(boxes, counts)])
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)

    normalized, _ = normalize_points(pts)
    cloud = PointCloud(points=normalized, id=f"{spec.family}-{spec.seed}")
    k_bound = len(FAMILY_LABELS[spec.family])
    return cloud, KWayLabeling(labels=labels, k_bound=k_bound)


def corrupt_mask(cloud: PointCloud, mask: BinaryMask, spec: CorruptionSpec) -> BinaryMask:
    """Flip floor(delete_rate*|F|) foreground points out and
    floor(insert_rate*|B|) background points in, insertions drawn first from
    background points within 0.15 of the foreground bounding box. The noise
    thus looks like a smeared part boundary, not salt and pepper."""
    mask.check_for(cloud)
    fg = mask.foreground_indices()
    bg = mask.background_indices()
    if len(fg) == 0 or len(bg) == 0:
        raise ValueError("corrupt_mask needs non-empty foreground and background")
    n_del = int(np.floor(spec.delete_rate * len(fg)))
    n_ins = int(np.floor(spec.insert_rate * len(bg)))
    if len(fg) - n_del + n_ins == 0:
        raise ValueError("corruption would empty the foreground")

    rng = np.random.default_rng(spec.seed)
    drop = rng.choice(fg, size=n_del, replace=False)

    lo = cloud.points[fg].min(axis=0) - 0.15
    hi = cloud.points[fg].max(axis=0) + 0.15
    bg_pts = cloud.points[bg]
    near = bg[np.all((bg_pts >= lo) & (bg_pts <= hi), axis=1)]
    far = np.setdiff1d(bg, near, assume_unique=True)
    pool = np.concatenate([rng.permutation(near), rng.permutation(far)])
    add = pool[:n_ins]

    flags = np.array(mask.flags)
    flags[drop] = False
    flags[add] = True
    return BinaryMask(flags=flags)
