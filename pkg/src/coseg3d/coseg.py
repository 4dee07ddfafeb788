"""Set-adaptive co-segmentation.

A small K-way point classifier is optimized per input set against a rank-based
group consistency energy: descriptors of same-label parts across the set
should form a low-rank (nearly collinear) matrix while different-label parts
should stay distinct. The feature encoders and the denoising refiner are
frozen throughout; only the classifier moves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BinaryMask, KWayLabeling, PointCloud, ShapeSet
from .encoders import FeatureField, mrg_encode, msg_encode
from .linalg import second_singular_value
from .nn import Layer, init_mlp, mlp_forward, mlp_params
from .optim import Adam
from .prior import PriorWeights, denoise

__all__ = [
    "ABLATIONS",
    "CosegCollapseError",
    "CosegHyper",
    "CosegResult",
    "CosegWeights",
    "PartFeatureMatrix",
    "TraceRow",
    "classify_kway",
    "completeness_loss",
    "cosegment",
    "group_consistency_loss",
    "init_coseg_weights",
    "part_descriptor",
    "refine_and_recompose",
]

log = logging.getLogger(__name__)

FEATURE_WIDTH = 128

# Pre-softmax score used for labels whose thresholded mask came up empty;
# large enough that the label keeps probability ~0 and stays unpopulated.
EMPTY_LABEL_SCORE = -1e9

# Floor under the denoiser's foreground probability before the log turns it
# into an additive logit bias. The resulting veto is clamped at log(floor)
# ~ -9 nats no matter how large the bias weight is, gentle enough that a
# label the denoiser dislikes at init can still recover.
DENOISE_BIAS_FLOOR = 1e-4

ABLATIONS = ("no-prior", "no-contrastive", "no-completeness", "mrg-parts")


class CosegCollapseError(RuntimeError):
    """Optimization collapsed to fewer than 2 populated labels twice."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class CosegWeights:
    """The per-set trainable part: a point-wise classifier over frozen
    128-D features (plus, optionally, the raw point coordinates), emitting
    one logit per abstract label. The first layer's width declares which
    input layout the weights expect."""

    classifier: list[Layer]

    def __post_init__(self):
        in_width = self.classifier[0].weight.data.shape[0]
        if in_width not in (FEATURE_WIDTH, FEATURE_WIDTH + 3):
            raise ValueError(
                f"classifier input width must be {FEATURE_WIDTH} or "
                f"{FEATURE_WIDTH + 3}, got {in_width}"
            )
        if self.k_bound < 2:
            raise ValueError("classifier must emit at least 2 logits")

    @property
    def k_bound(self) -> int:
        return self.classifier[-1].bias.data.shape[0]

    def params(self) -> list[Tensor]:
        return mlp_params(self.classifier)


@dataclass(frozen=True)
class CosegHyper:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_iters: int = 300
    batch_size: int = 8
    batch_stride: int = 4
    full_set_limit: int = 16  # sets up to this size are one batch
    lambda_completeness: float = 1.0
    stop_rel_change: float = 1e-4
    stop_window: int = 20
    collapse_window: int = 20
    min_part_points: int = 5
    mask_threshold: float = 0.5
    prior_bias_weight: float = 1.0
    classifier_hidden: int = 64
    init_gain: float = 6.0
    include_coords: bool = False  # classifier also reads raw xyz
    seed: int = 0
    ablate: str | None = None

    def __post_init__(self):
        if self.ablate is not None and self.ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablate!r}; options: {ABLATIONS}")
        # 0 iterations is legal: the run reports the random-init labeling
        if self.max_iters < 0 or self.batch_size < 2 or self.batch_stride < 1:
            raise ValueError("max_iters >= 0, batch_size >= 2, batch_stride >= 1 required")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask_threshold must lie strictly inside (0, 1)")
        if self.lambda_completeness < 0.0:
            raise ValueError("lambda_completeness must be >= 0")
        if self.prior_bias_weight < 0.0:
            raise ValueError("prior_bias_weight must be >= 0")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    rank_term: float  # max over labels of sigma_2(M_i)
    contrastive_term: float  # min over label pairs of sigma_2(concat); nan if < 2 labels
    completeness_term: float
    total: float  # the objective actually optimized this iteration


@dataclass
class PartFeatureMatrix:
    """Descriptors of every populated label-i part across the batch, one row
    per (shape, part), in a fixed shape order."""

    matrix: Tensor  # (rows, 128), unit rows
    label: int
    row_shapes: tuple[int, ...]  # row -> shape index within the set

    def __post_init__(self):
        data = self.matrix.data
        # production descriptors are 128-wide; anything >= 2 columns is legal
        # so the energy is checkable against small hand-built matrices
        if data.ndim != 2 or data.shape[1] < 2:
            raise ValueError(f"part matrix must be (rows, >=2), got {data.shape}")
        if data.shape[0] != len(self.row_shapes):
            raise ValueError("row_shapes length must match the row count")
        if not np.all(np.isfinite(data)):
            raise ValueError("part matrix has non-finite rows")
        norms = np.linalg.norm(data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("part matrix rows must be unit-normalized")

    @property
    def n_rows(self) -> int:
        return self.matrix.data.shape[0]


@dataclass
class CosegResult:
    labelings: list[KWayLabeling]
    final_energy: float
    trace: list[TraceRow]
    labels_used: set[int]
    restarted: bool
    iterations: int

    def energy_values(self) -> list[float]:
        return [row.total for row in self.trace]


def init_coseg_weights(rng: np.random.Generator, k: int,
                       hidden: int = 64, init_gain: float = 6.0,
                       include_coords: bool = False) -> CosegWeights:
    """Random classifier init.

    The final layer is scaled up so initial per-point softmax maxima often
    clear the foreground threshold: with near-uniform logits every thresholded
    mask is empty and no gradient path exists to escape. With include_coords
    the classifier also reads the three raw point coordinates.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    width = FEATURE_WIDTH + (3 if include_coords else 0)
    classifier = init_mlp([width, hidden, k], rng, final_activation="none")
    last = classifier[-1]
    last.weight.data *= init_gain
    last.bias.data *= init_gain
    return CosegWeights(classifier=classifier)


def classify_kway(cloud: PointCloud, prior_weights: PriorWeights,
                  coseg_weights: CosegWeights,
                  mrg_field: FeatureField | None = None) -> Tensor:
    """(n_points, K) logits from the frozen per-point features.

    The feature field is always detached here: gradients reach only the
    classifier, never the encoders. Weights whose first layer is 3 wider
    than the feature field additionally consume the raw point coordinates.
    """
    if mrg_field is None:
        mrg_field = mrg_encode(cloud, prior_weights.mrg)
    feats = mrg_field.features.detach()
    if coseg_weights.classifier[0].weight.data.shape[0] == FEATURE_WIDTH + 3:
        feats = ad.concat_cols([feats, ad.constant(cloud.points)])
    return mlp_forward(feats, coseg_weights.classifier)


def refine_and_recompose(cloud: PointCloud, logits: Tensor,
                         prior_weights: PriorWeights,
                         msg_field: FeatureField | None = None,
                         mrg_field: FeatureField | None = None,
                         threshold: float = 0.5,
                         bias_weight: float = 1.0) -> Tensor:
    """Per-point K-way probability map with the frozen denoiser folded in.

    Each label's soft weight is hard-thresholded into a mask, the denoiser
    scores that mask, and the log-score (times bias_weight) is added to the
    label's logit column before a row softmax resolves overlaps. The
    threshold (and hence the denoiser output) is treated as constant during
    backpropagation; gradient reaches the logits only through their direct
    additive path. Labels whose mask is empty get a large negative constant
    column and stay empty.

    bias_weight sets how loudly the prior's verdict speaks relative to the
    classifier: the group energy alone cannot prefer semantically right
    parts over any cross-set-consistent slicing, so this is the force that
    pulls proposals toward parts the denoiser recognizes. The veto side is
    clamped at log(DENOISE_BIAS_FLOOR) nats regardless of bias_weight, so a
    louder prior amplifies preferences without one bad early mask score
    permanently killing a label.
    """
    n, k = logits.data.shape
    if n != cloud.n_points:
        raise ValueError("logits row count != cloud point count")
    soft = ad.softmax_rows(logits)
    if msg_field is None:
        msg_field = msg_encode(cloud, prior_weights.msg)
    if mrg_field is None:
        mrg_field = mrg_encode(cloud, prior_weights.mrg)
    msg_field = msg_field.detach()
    mrg_field = mrg_field.detach()

    cols = []
    for i in range(k):
        flags = soft.data[:, i] > threshold
        if not flags.any():
            cols.append(ad.constant(np.full(n, EMPTY_LABEL_SCORE)))
            continue
        scores = denoise(cloud, BinaryMask(flags=flags), prior_weights,
                         msg_field=msg_field, mrg_field=mrg_field)
        # constant: no backward through the threshold or the denoiser
        bias = np.maximum(bias_weight * np.log(scores.data + 1e-12),
                          np.log(DENOISE_BIAS_FLOOR))
        cols.append(ad.add(ad.column(logits, i), ad.constant(bias)))
    return ad.softmax_rows(ad.stack_cols(cols))


def part_descriptor(cloud: PointCloud, part_soft_mask: Tensor,
                    prior_weights: PriorWeights,
                    msg_field: FeatureField | None = None) -> Tensor:
    """128-D descriptor of one soft part: componentwise max over points of
    (mask weight x feature row), then unit-normalized.

    Feature rows are post-ReLU non-negative, so zero-weight points never win
    the max and cannot perturb the descriptor.
    """
    w = ad.as_tensor(part_soft_mask)
    if w.data.ndim != 1 or w.data.shape[0] != cloud.n_points:
        raise ValueError("part_soft_mask must be one weight per point")
    if w.data.min() < 0.0 or w.data.max() > 1.0 + 1e-9:
        raise ValueError("part_soft_mask entries must lie in [0, 1]")
    if msg_field is None:
        msg_field = msg_encode(cloud, prior_weights.msg)
    feats = msg_field.features.detach()
    pooled = ad.max_rows(ad.scale_rows(feats, w))
    return ad.l2_normalize(pooled)


def _consistency_terms(matrices: list[PartFeatureMatrix]) -> tuple[Tensor, Tensor | None]:
    """(max over labels of sigma_2, min over label pairs of sigma_2(concat));
    the second is None when fewer than 2 labels are populated."""
    populated = [m for m in matrices if m.n_rows > 0]
    if not populated:
        raise ValueError("group consistency needs at least one populated label")
    max_term = ad.reduce_max([second_singular_value(m.matrix) for m in populated])
    if len(populated) < 2:
        return max_term, None
    pair_terms = []
    for a in range(len(populated)):
        for b in range(a + 1, len(populated)):
            joined = ad.concat_rows([populated[a].matrix, populated[b].matrix])
            pair_terms.append(second_singular_value(joined))
    return max_term, ad.reduce_min(pair_terms)


def group_consistency_loss(matrices: list[PartFeatureMatrix]) -> Tensor:
    """1 + max_i sigma_2(M_i) - min_{i != j} sigma_2(concat(M_i, M_j)).

    With fewer than 2 populated labels the pairwise term is undefined; the
    loss degrades to 1 + max term and the degenerate state is counted.
    """
    max_term, min_term = _consistency_terms(matrices)
    loss = ad.add(ad.constant(np.asarray(1.0)), max_term)
    if min_term is None:
        ad._bump("coseg_degenerate_labels")
        return loss
    return ad.sub(loss, min_term)


def completeness_loss(prob_maps: list[Tensor]) -> Tensor:
    """Mean over every point of (1 - max_k p): the mass not confidently
    claimed by any label, i.e. the gaps between parts."""
    if not prob_maps:
        raise ValueError("completeness_loss needs at least one map")
    total_points = 0
    sums = []
    for p in prob_maps:
        if np.abs(p.data.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("probability map rows must sum to 1")
        total_points += p.data.shape[0]
        sums.append(ad.reduce_sum(ad.row_max(p)))
    claimed = sums[0]
    for s in sums[1:]:
        claimed = ad.add(claimed, s)
    return ad.add(ad.constant(np.asarray(1.0)), ad.scale(claimed, -1.0 / total_points))


@dataclass
class _FrozenShape:
    """One set member with its feature fields precomputed and detached."""

    index: int
    cloud: PointCloud
    msg: FeatureField
    mrg: FeatureField

    @classmethod
    def freeze(cls, index: int, cloud: PointCloud, prior_weights: PriorWeights):
        return cls(
            index=index,
            cloud=cloud,
            msg=msg_encode(cloud, prior_weights.msg).detach(),
            mrg=mrg_encode(cloud, prior_weights.mrg).detach(),
        )


def _batches(n: int, hyper: CosegHyper) -> list[np.ndarray]:
    """Overlapping index windows covering all shapes; one window per step,
    cycled. Small sets are a single full batch."""
    if n <= hyper.full_set_limit:
        return [np.arange(n)]
    starts = range(0, n, hyper.batch_stride)
    return [np.arange(s, s + hyper.batch_size) % n for s in starts]


def _forward_maps(shapes: list[_FrozenShape], weights: CosegWeights,
                  prior_weights: PriorWeights, hyper: CosegHyper) -> list[Tensor]:
    maps = []
    for sh in shapes:
        logits = classify_kway(sh.cloud, prior_weights, weights, mrg_field=sh.mrg)
        if hyper.ablate == "no-prior":
            maps.append(ad.softmax_rows(logits))
        else:
            maps.append(refine_and_recompose(
                sh.cloud, logits, prior_weights,
                msg_field=sh.msg, mrg_field=sh.mrg,
                threshold=hyper.mask_threshold,
                bias_weight=hyper.prior_bias_weight,
            ))
    return maps


def _build_matrices(shapes: list[_FrozenShape], maps: list[Tensor],
                    prior_weights: PriorWeights, hyper: CosegHyper,
                    k: int) -> list[PartFeatureMatrix]:
    matrices = []
    for label in range(k):
        rows, row_shapes = [], []
        for sh, pmap in zip(shapes, maps):
            support = int((pmap.data.argmax(axis=1) == label).sum())
            if support < hyper.min_part_points:
                continue
            fields = sh.mrg if hyper.ablate == "mrg-parts" else sh.msg
            rows.append(part_descriptor(sh.cloud, ad.column(pmap, label),
                                        prior_weights, msg_field=fields))
            row_shapes.append(sh.index)
        if rows:
            matrices.append(PartFeatureMatrix(
                matrix=ad.stack_rows(rows), label=label,
                row_shapes=tuple(row_shapes),
            ))
    return matrices


def _objective(matrices: list[PartFeatureMatrix], maps: list[Tensor],
               hyper: CosegHyper) -> tuple[Tensor, float, float, float]:
    """The iteration's loss tensor plus (rank, contrastive, completeness)
    readings for the trace. Ablations drop terms from the loss but every term
    is still recorded."""
    max_term, min_term = _consistency_terms(matrices)
    comp = completeness_loss(maps)

    loss = ad.add(ad.constant(np.asarray(1.0)), max_term)
    if min_term is not None and hyper.ablate != "no-contrastive":
        loss = ad.sub(loss, min_term)
    if hyper.ablate != "no-completeness":
        loss = ad.add(loss, ad.scale(comp, hyper.lambda_completeness))

    rank_val = float(max_term.data)
    contrast_val = float(min_term.data) if min_term is not None else math.nan
    return loss, rank_val, contrast_val, float(comp.data)


def _hard_labelings(shapes: list[_FrozenShape], weights: CosegWeights,
                    prior_weights: PriorWeights, hyper: CosegHyper,
                    k: int) -> list[KWayLabeling]:
    maps = _forward_maps(shapes, weights, prior_weights, hyper)
    return [
        KWayLabeling(labels=m.data.argmax(axis=1).astype(np.int64), k_bound=k)
        for m in maps
    ]


def _attempt(shapes: list[_FrozenShape], k: int, prior_weights: PriorWeights,
             hyper: CosegHyper, seed: int) -> tuple[CosegResult | None, dict]:
    """One optimization run. Returns (result, diagnostics); result is None on
    collapse (fewer than 2 populated labels for collapse_window iterations)."""
    rng = np.random.default_rng(seed)
    weights = init_coseg_weights(rng, k, hidden=hyper.classifier_hidden,
                                 init_gain=hyper.init_gain,
                                 include_coords=hyper.include_coords)
    opt = Adam(weights.params(), learning_rate=hyper.learning_rate,
               beta1=hyper.beta1, beta2=hyper.beta2)
    batches = _batches(len(shapes), hyper)

    trace: list[TraceRow] = []
    collapse_run = 0
    small_change_run = 0
    for it in range(hyper.max_iters):
        batch_shapes = [shapes[i] for i in batches[it % len(batches)]]
        maps = _forward_maps(batch_shapes, weights, prior_weights, hyper)
        matrices = _build_matrices(batch_shapes, maps, prior_weights, hyper, k)

        populated = {m.label for m in matrices}
        collapse_run = collapse_run + 1 if len(populated) < 2 else 0
        if collapse_run >= hyper.collapse_window:
            return None, {
                "collapsed_at": it,
                "populated_labels": sorted(populated),
                "seed": seed,
                "trace_len": len(trace),
            }

        loss, rank_val, contrast_val, comp_val = _objective(matrices, maps, hyper)
        trace.append(TraceRow(it, rank_val, contrast_val, comp_val, float(loss.data)))

        loss.backward()
        opt.step()
        opt.zero_grad()

        if len(trace) >= 2:
            prev, cur = trace[-2].total, trace[-1].total
            rel = abs(cur - prev) / max(abs(prev), 1e-12)
            small_change_run = small_change_run + 1 if rel < hyper.stop_rel_change else 0
            if small_change_run >= hyper.stop_window:
                break

    labelings = _hard_labelings(shapes, weights, prior_weights, hyper, k)
    labels_used = set()
    for lab in labelings:
        labels_used |= lab.labels_used()
    if trace:
        final_energy = trace[-1].total
    else:
        # zero-iteration run: evaluate the objective once at the init point
        maps = _forward_maps(shapes, weights, prior_weights, hyper)
        matrices = _build_matrices(shapes, maps, prior_weights, hyper, k)
        loss, _, _, _ = _objective(matrices, maps, hyper)
        final_energy = float(loss.data)
    result = CosegResult(
        labelings=labelings,
        final_energy=final_energy,
        trace=trace,
        labels_used=labels_used,
        restarted=False,
        iterations=len(trace),
    )
    return result, {"seed": seed, "iterations": len(trace)}


def cosegment(shape_set: ShapeSet, k: int, prior_weights: PriorWeights,
              hyper: CosegHyper = CosegHyper()) -> CosegResult:
    """Jointly label every shape in the set with at most k abstract parts.

    Fixed seed, set, k and hyperparameters give an identical result. A
    collapsed run (every point ends up under one label) is retried once with
    the next seed; a second collapse raises with diagnostics rather than
    returning a degenerate labeling.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    shapes = [
        _FrozenShape.freeze(i, cloud, prior_weights)
        for i, cloud in enumerate(shape_set.shapes)
    ]

    result, diag = _attempt(shapes, k, prior_weights, hyper, hyper.seed)
    if result is not None:
        return result
    log.warning("cosegment: collapse (%s); restarting with seed %d",
                diag, hyper.seed + 1)
    first_diag = diag
    result, diag = _attempt(shapes, k, prior_weights, hyper, hyper.seed + 1)
    if result is not None:
        result.restarted = True
        return result
    raise CosegCollapseError(
        "co-segmentation collapsed to a single label on both attempts",
        diagnostics={"first": first_diag, "second": diag},
    )
