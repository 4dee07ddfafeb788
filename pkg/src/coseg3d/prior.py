"""The offline-trained part denoiser.

A noisy binary part mask conditions the network two ways: globally, through
the mean multi-scale feature of the (noisy) foreground, and locally, through
each point's multi-resolution feature. A small pointwise classifier combines
both into a foreground probability per point. Trained with NLL against the
clean mask under boundary-biased corruption, it learns what a plausible part
of the family looks like, which is all the runtime stage needs from it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import BinaryMask, PointCloud
from .encoders import (
    DEFAULT_NEIGHBOR_CAP,
    DEFAULT_RADII,
    EncoderWeights,
    FeatureField,
    init_mrg_weights,
    init_msg_weights,
    mrg_encode,
    msg_encode_rows,
)
from .nn import Layer, init_mlp, mlp_forward, mlp_params
from .optim import Adam
from .synth import CorruptionSpec, corrupt_mask

__all__ = [
    "EmptyForegroundError",
    "PriorWeights",
    "PriorHyper",
    "init_prior_weights",
    "foreground_descriptor",
    "denoise",
    "denoise_scores",
    "train_prior",
    "evaluate_prior",
    "save_prior",
    "load_prior",
]

log = logging.getLogger(__name__)

CLASSIFIER_INPUT = 256  # per-point feature (128) + foreground descriptor (128)


class EmptyForegroundError(ValueError):
    """Raised where an empty foreground is a caller error, not a signal."""


@dataclass
class PriorWeights:
    msg: EncoderWeights
    mrg: EncoderWeights
    classifier: list[Layer]  # 256 -> hidden -> hidden -> 2 logits

    def __post_init__(self):
        if self.msg.kind != "MSG" or self.mrg.kind != "MRG":
            raise ValueError("PriorWeights wants one MSG and one MRG encoder")
        if self.classifier[0].weight.data.shape[0] != CLASSIFIER_INPUT:
            raise ValueError(
                f"classifier input width must be {CLASSIFIER_INPUT}, got "
                f"{self.classifier[0].weight.data.shape[0]}"
            )
        if self.classifier[-1].bias.data.shape[0] != 2:
            raise ValueError("classifier must end in 2 logits")

    def params(self) -> list[Tensor]:
        return self.msg.params() + self.mrg.params() + mlp_params(self.classifier)


@dataclass(frozen=True)
class PriorHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    steps: int = 5000
    corruption_low: float = 0.20
    corruption_high: float = 0.30
    seed: int = 0
    classifier_hidden: int = 128

    def __post_init__(self):
        if not 0.0 <= self.corruption_low <= self.corruption_high <= 0.5:
            raise ValueError("corruption range must satisfy 0 <= low <= high <= 0.5")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def init_prior_weights(rng: np.random.Generator, radii=DEFAULT_RADII,
                       neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                       classifier_hidden: int = 128) -> PriorWeights:
    msg = init_msg_weights(rng, radii=radii, neighbor_cap=neighbor_cap)
    mrg = init_mrg_weights(rng, radii=radii, neighbor_cap=neighbor_cap)
    classifier = init_mlp(
        [CLASSIFIER_INPUT, classifier_hidden, classifier_hidden, 2],
        rng, final_activation="none",
    )
    return PriorWeights(msg=msg, mrg=mrg, classifier=classifier)


def foreground_descriptor(cloud: PointCloud, mask: BinaryMask,
                          weights: PriorWeights,
                          msg_field: FeatureField | None = None) -> Tensor:
    """Mean multi-scale feature over the mask's foreground points (128-D).

    msg_field, when supplied, must be this cloud's precomputed MSG field;
    encoding is then skipped. Empty foreground is a caller error here.
    """
    mask.check_for(cloud)
    fg = mask.foreground_indices()
    if len(fg) == 0:
        raise EmptyForegroundError("foreground_descriptor: empty foreground")
    if msg_field is not None:
        return ad.mean_rows(msg_field.features, fg)
    return ad.mean_rows(msg_encode_rows(cloud, weights.msg, fg), np.arange(len(fg)))


def _classifier_probs(cloud: PointCloud, mask: BinaryMask, weights: PriorWeights,
                      msg_field: FeatureField | None,
                      mrg_field: FeatureField | None) -> Tensor:
    f_fg = foreground_descriptor(cloud, mask, weights, msg_field=msg_field)
    if mrg_field is None:
        mrg_field = mrg_encode(cloud, weights.mrg)
    inp = ad.concat_cols([
        mrg_field.features,
        ad.broadcast_row(f_fg, cloud.n_points),
    ])
    logits = mlp_forward(inp, weights.classifier)
    return ad.softmax_rows(logits)


def denoise_scores(cloud: PointCloud, noisy_mask: BinaryMask, weights: PriorWeights,
                   msg_field: FeatureField | None = None,
                   mrg_field: FeatureField | None = None) -> Tensor:
    """(n, 2) class probabilities (background, foreground) per point."""
    return _classifier_probs(cloud, noisy_mask, weights, msg_field, mrg_field)


def denoise(cloud: PointCloud, noisy_mask: BinaryMask, weights: PriorWeights,
            msg_field: FeatureField | None = None,
            mrg_field: FeatureField | None = None) -> Tensor:
    """Per-point foreground probability in [0, 1].

    An empty foreground means the proposed part vanished: the result is all
    zeros (logged), so callers can treat the label as unpopulated.
    """
    noisy_mask.check_for(cloud)
    if not noisy_mask.flags.any():
        log.info("denoise: empty foreground on %s, returning zeros", cloud.id or "<cloud>")
        return ad.constant(np.zeros(cloud.n_points))
    probs = _classifier_probs(cloud, noisy_mask, weights, msg_field, mrg_field)
    return ad.column(probs, 1)


def train_prior(dataset: list[tuple[PointCloud, BinaryMask]],
                hyper: PriorHyper = PriorHyper(),
                weights: PriorWeights | None = None,
                radii=DEFAULT_RADII,
                neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                ) -> tuple[PriorWeights, list[float]]:
    """Denoising training loop; returns the weights and per-step loss log.

    Each example draws fresh insert/delete rates uniformly from the
    configured corruption range, corrupts a clean mask, and asks the network
    to reproduce the clean flags under NLL. Deterministic per hyper.seed.
    """
    if not dataset:
        raise ValueError("train_prior: empty dataset")
    for cloud, mask in dataset:
        mask.check_for(cloud)
        if not mask.flags.any():
            raise ValueError(f"train_prior: empty foreground in mask for {cloud.id}")

    rng = np.random.default_rng(hyper.seed)
    if weights is None:
        weights = init_prior_weights(
            rng, radii=radii, neighbor_cap=neighbor_cap,
            classifier_hidden=hyper.classifier_hidden,
        )
    opt = Adam(weights.params(), learning_rate=hyper.learning_rate,
               beta1=hyper.beta1, beta2=hyper.beta2)
    curve: list[float] = []
    for _ in range(hyper.steps):
        terms = []
        for _ in range(hyper.batch_size):
            cloud, clean = dataset[int(rng.integers(len(dataset)))]
            spec = CorruptionSpec(
                insert_rate=float(rng.uniform(hyper.corruption_low, hyper.corruption_high)),
                delete_rate=float(rng.uniform(hyper.corruption_low, hyper.corruption_high)),
                seed=int(rng.integers(2**31)),
            )
            noisy = corrupt_mask(cloud, clean, spec)
            probs = denoise_scores(cloud, noisy, weights)
            terms.append(ad.nll_loss(probs, clean.flags.astype(np.intp)))
        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        loss = ad.scale(loss, 1.0 / hyper.batch_size)
        loss.backward()
        opt.step()
        curve.append(float(loss.data))
    return weights, curve


def evaluate_prior(weights: PriorWeights,
                   cases: list[tuple[PointCloud, BinaryMask, BinaryMask]]) -> float:
    """Mean per-point accuracy of 0.5-thresholded denoise output.

    cases = (cloud, noisy mask, clean mask) triples.
    """
    if not cases:
        raise ValueError("evaluate_prior: no cases")
    accs = []
    for cloud, noisy, clean in cases:
        prob = denoise(cloud, noisy, weights).data
        pred = prob >= 0.5
        accs.append(float((pred == clean.flags).mean()))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# checkpoints


def _encoder_to_named(w: EncoderWeights, prefix: str) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    for i, mlp in enumerate(w.scale_mlps):
        named.update(checkpoint.mlp_to_named(mlp, f"{prefix}mlp{i}."))
    named[f"{prefix}radii"] = np.asarray(w.radii)
    named[f"{prefix}cap"] = np.asarray(-1.0 if w.neighbor_cap is None else float(w.neighbor_cap))
    named[f"{prefix}cap_seed"] = np.asarray(float(w.cap_seed))
    return named


def _encoder_from_named(named: dict[str, np.ndarray], prefix: str, kind: str) -> EncoderWeights:
    mlps = []
    i = 0
    while f"{prefix}mlp{i}.0.weight" in named:
        mlps.append(tuple(checkpoint.mlp_from_named(named, f"{prefix}mlp{i}.")))
        i += 1
    cap = named[f"{prefix}cap"]
    return EncoderWeights(
        kind=kind,
        scale_mlps=tuple(mlps),
        radii=tuple(float(v) for v in named[f"{prefix}radii"]),
        neighbor_cap=None if float(cap) < 0 else int(cap),
        cap_seed=int(named[f"{prefix}cap_seed"]),
    )


def save_prior(weights: PriorWeights, path) -> None:
    named = _encoder_to_named(weights.msg, "msg.")
    named.update(_encoder_to_named(weights.mrg, "mrg."))
    named.update(checkpoint.mlp_to_named(weights.classifier, "classifier."))
    checkpoint.save_named(path, named)


def load_prior(path) -> PriorWeights:
    named = checkpoint.load_named(path)
    return PriorWeights(
        msg=_encoder_from_named(named, "msg.", "MSG"),
        mrg=_encoder_from_named(named, "mrg.", "MRG"),
        classifier=checkpoint.mlp_from_named(named, "classifier."),
    )
