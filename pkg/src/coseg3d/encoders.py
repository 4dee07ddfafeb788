"""Per-point 128-D feature encoders over local neighborhoods.

Two flavors share the same machinery: the multi-scale encoder concatenates
max-pooled pointwise-network features over three growing radii (widths
32+32+64), and the multi-resolution encoder builds small-radius features
first, then concatenates their max-pool over the large radius with a feature
computed directly on the large neighborhood (64+64).

Every point acts as its own neighborhood center; there is no downsampling
hierarchy. Clouds here are small enough that the quadratic neighbor pass is
cheap, and group index tables are cached per (cloud, radius, cap).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PointCloud
from .nn import Layer, init_mlp, mlp_forward, mlp_params

__all__ = [
    "EncoderWeights",
    "FeatureField",
    "init_msg_weights",
    "init_mrg_weights",
    "msg_encode",
    "mrg_encode",
    "neighborhood_groups",
    "clear_group_cache",
]

DEFAULT_RADII = (0.2, 0.4, 0.8)
DEFAULT_NEIGHBOR_CAP = 64

MSG_SCALE_WIDTHS = (32, 32, 64)
MRG_LEVEL_WIDTH = 64


@dataclass
class EncoderWeights:
    """Shared pointwise-network parameters for one encoder.

    kind "MSG": one network per radius, scale_mlps aligned with radii.
    kind "MRG": scale_mlps = (level-1 network at radii[0],
    direct level-2 network at radii[2]).
    """

    kind: str
    scale_mlps: tuple[tuple[Layer, ...], ...]
    radii: tuple[float, float, float] = DEFAULT_RADII
    neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP
    cap_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("MSG", "MRG"):
            raise ValueError(f"encoder kind must be MSG or MRG, got {self.kind!r}")
        r = self.radii
        if len(r) != 3 or not (0 < r[0] < r[1] < r[2] <= 2.0):
            raise ValueError(f"radii must be strictly increasing in (0, 2], got {r}")
        widths = [int(mlp[-1].bias.data.shape[0]) for mlp in self.scale_mlps]
        if sum(widths) != 128:
            raise ValueError(f"scale output widths must sum to 128, got {widths}")
        if self.kind == "MSG" and len(self.scale_mlps) != 3:
            raise ValueError("MSG expects one network per radius")
        if self.kind == "MRG" and len(self.scale_mlps) != 2:
            raise ValueError("MRG expects a level-1 and a level-2 network")
        if self.neighbor_cap is not None and self.neighbor_cap < 1:
            raise ValueError("neighbor_cap must be >= 1 or None")

    def params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for mlp in self.scale_mlps:
            out.extend(mlp_params(mlp))
        return out


@dataclass
class FeatureField:
    features: Tensor  # (n_points, 128)
    kind: str
    source_shape_id: str = ""

    def __post_init__(self):
        if self.features.data.ndim != 2 or self.features.data.shape[1] != 128:
            raise ValueError(f"feature field must be (n, 128), got {self.features.data.shape}")
        if not np.all(np.isfinite(self.features.data)):
            raise ValueError("feature field has non-finite values")

    @property
    def n_points(self) -> int:
        return self.features.data.shape[0]

    def detach(self) -> "FeatureField":
        return FeatureField(self.features.detach(), self.kind, self.source_shape_id)


def init_msg_weights(rng: np.random.Generator, radii=DEFAULT_RADII,
                     neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                     hidden: int = 32) -> EncoderWeights:
    mlps = tuple(
        tuple(init_mlp([3, hidden, w], rng, final_activation="relu"))
        for w in MSG_SCALE_WIDTHS
    )
    return EncoderWeights(kind="MSG", scale_mlps=mlps, radii=tuple(radii),
                          neighbor_cap=neighbor_cap)


def init_mrg_weights(rng: np.random.Generator, radii=DEFAULT_RADII,
                     neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                     hidden: int = 32) -> EncoderWeights:
    mlps = tuple(
        tuple(init_mlp([3, hidden, MRG_LEVEL_WIDTH], rng, final_activation="relu"))
        for _ in range(2)
    )
    return EncoderWeights(kind="MRG", scale_mlps=mlps, radii=tuple(radii),
                          neighbor_cap=neighbor_cap)


# ---------------------------------------------------------------------------
# neighborhood group tables

_group_cache: dict[tuple, np.ndarray] = {}


def clear_group_cache() -> None:
    _group_cache.clear()


def _cloud_digest(cloud: PointCloud) -> str:
    digest = getattr(cloud, "_digest", None)
    if digest is None:
        digest = hashlib.sha1(cloud.points.tobytes()).hexdigest()
        object.__setattr__(cloud, "_digest", digest)  # memo on the frozen cloud
    return digest


def neighborhood_groups(cloud: PointCloud, radius: float,
                        cap: int | None, cap_seed: int = 0) -> np.ndarray:
    """(n, width) table of neighbor indices within ``radius`` of each point.

    Row i always starts with i itself; rows shorter than the widest
    neighborhood are padded by repeating the center, which is harmless under
    max-pooling. With a cap, each over-full neighborhood keeps the center
    plus a seeded uniform subsample.
    """
    key = (_cloud_digest(cloud), float(radius), cap, cap_seed)
    hit = _group_cache.get(key)
    if hit is not None:
        return hit

    pts = cloud.points
    n = pts.shape[0]
    r2 = float(radius) ** 2
    rng = np.random.default_rng(cap_seed)
    rows: list[np.ndarray] = []
    for start in range(0, n, 256):  # block the pairwise pass to bound memory
        block = pts[start : start + 256]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        for b in range(block.shape[0]):
            i = start + b
            idx = np.flatnonzero(d2[b] <= r2)
            idx = idx[idx != i]
            if cap is not None and len(idx) > cap - 1:
                idx = idx[rng.choice(len(idx), size=cap - 1, replace=False)]
            rows.append(np.concatenate([[i], idx]))
    width = max(len(r) for r in rows)
    table = np.full((n, width), -1, dtype=np.intp)
    for i, r in enumerate(rows):
        table[i, : len(r)] = r
        table[i, len(r):] = i  # pad with the center
    table.setflags(write=False)
    _group_cache[key] = table
    return table


# ---------------------------------------------------------------------------
# encoding


def _pooled_scale_features(cloud: PointCloud, mlp: tuple[Layer, ...],
                           table: np.ndarray, rows: np.ndarray) -> Tensor:
    """Run the pointwise network on center-relative neighbors and max-pool.

    rows selects which centers to compute; output is (len(rows), width).
    """
    sub = table[rows]  # (m, c)
    m, c = sub.shape
    rel = cloud.points[sub.reshape(-1)] - np.repeat(cloud.points[rows], c, axis=0)
    feats = mlp_forward(ad.constant(rel), mlp)  # (m*c, w)
    return ad.block_max_pool(feats, c)


def _msg_features(cloud: PointCloud, weights: EncoderWeights,
                  rows: np.ndarray | None = None) -> Tensor:
    if rows is None:
        rows = np.arange(cloud.n_points)
    parts = []
    for radius, mlp in zip(weights.radii, weights.scale_mlps):
        table = neighborhood_groups(cloud, radius, weights.neighbor_cap, weights.cap_seed)
        parts.append(_pooled_scale_features(cloud, mlp, table, rows))
    return ad.concat_cols(parts)


def msg_encode(cloud: PointCloud, weights: EncoderWeights) -> FeatureField:
    """Multi-scale field: per point, pooled features at each radius, concatenated."""
    if weights.kind != "MSG":
        raise ValueError("msg_encode requires MSG weights")
    return FeatureField(_msg_features(cloud, weights), kind="MSG",
                        source_shape_id=cloud.id)


def msg_encode_rows(cloud: PointCloud, weights: EncoderWeights,
                    rows: np.ndarray) -> Tensor:
    """MSG features for a subset of points only; same math as the full field."""
    if weights.kind != "MSG":
        raise ValueError("msg_encode_rows requires MSG weights")
    if len(rows) == 0:
        raise ValueError("msg_encode_rows: empty row selection")
    return _msg_features(cloud, weights, np.asarray(rows, dtype=np.intp))


def mrg_encode(cloud: PointCloud, weights: EncoderWeights) -> FeatureField:
    """Multi-resolution field: small-radius features pooled over the large
    radius, concatenated with a directly encoded large-radius feature."""
    if weights.kind != "MRG":
        raise ValueError("mrg_encode requires MRG weights")
    level1_mlp, level2_mlp = weights.scale_mlps
    r_small, _, r_large = weights.radii
    all_rows = np.arange(cloud.n_points)

    small_table = neighborhood_groups(cloud, r_small, weights.neighbor_cap, weights.cap_seed)
    level1 = _pooled_scale_features(cloud, level1_mlp, small_table, all_rows)  # (n, 64)

    large_table = neighborhood_groups(cloud, r_large, weights.neighbor_cap, weights.cap_seed)
    pooled_level1 = ad.group_max_pool(level1, large_table)  # (n, 64)
    direct = _pooled_scale_features(cloud, level2_mlp, large_table, all_rows)  # (n, 64)

    features = ad.concat_cols([pooled_level1, direct])
    return FeatureField(features, kind="MRG", source_shape_id=cloud.id)
