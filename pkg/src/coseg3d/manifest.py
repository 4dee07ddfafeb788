"""Experiment orchestration: a JSON manifest drives the full pipeline
(shape synthesis -> part-prior training -> co-segmentation -> evaluation)
and every artifact lands under one output directory.

Every random choice is driven by a seed named in the manifest; there are no
implicit defaults for seeds, so rerunning an identical manifest rewrites
byte-identical shape and label files.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coseg import CosegHyper, CosegResult, TraceRow, cosegment
from .data import BinaryMask, ShapeSet, save_labeling, save_pointcloud
from .encoders import DEFAULT_NEIGHBOR_CAP, DEFAULT_RADII
from .metrics import map_labels_by_overlap, rand_index
from .prior import PriorHyper, load_prior, save_prior, train_prior
from .synth import FAMILIES, SynthSpec, synth_shape

__all__ = [
    "ExperimentReport",
    "ManifestError",
    "StageError",
    "load_manifest",
    "read_trace_csv",
    "run_experiment",
    "write_probe_csv",
    "write_trace_csv",
]

STAGES = ("synth", "prior", "coseg", "eval")

TRACE_HEADER = "iteration,rank_term,contrastive_term,completeness_term,total"
PROBE_HEADER = "label_count,sample_index,sigma2_score,mse_score"


class ManifestError(ValueError):
    """The manifest is malformed; nothing has been written."""


class StageError(RuntimeError):
    """A pipeline stage failed after validation; partial outputs remain on
    disk and the status file marks the run incomplete."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentReport:
    name: str
    out_dir: Path
    ri_scores: list[float]
    mean_ri: float
    initial_energy: float
    final_energy: float
    stage_seconds: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# manifest loading and validation


def _need(section: dict, where: str, key: str, kind=None):
    if key not in section:
        raise ManifestError(f"{where}: missing required key {key!r}")
    value = section[key]
    if kind is not None and not isinstance(value, kind):
        raise ManifestError(
            f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _validate_synth(section: dict) -> None:
    family = _need(section, "synth", "family", str)
    if family not in FAMILIES:
        raise ManifestError(f"synth.family: unknown family {family!r}")
    if _need(section, "synth", "count", int) < 2:
        raise ManifestError("synth.count: need >= 2 shapes for a set")
    _need(section, "synth", "n_points", int)
    _need(section, "synth", "seed_base", int)


def _validate_prior(section: dict) -> None:
    if "checkpoint" in section:
        _need(section, "prior", "checkpoint", str)
        return
    for key in ("families", "shapes_per_family", "n_points", "seed_base",
                "steps", "seed"):
        _need(section, "prior", key)
    for fam in section["families"]:
        if fam not in FAMILIES:
            raise ManifestError(f"prior.families: unknown family {fam!r}")


def _validate_coseg(section: dict) -> None:
    if _need(section, "coseg", "k", int) < 2:
        raise ManifestError("coseg.k: need k >= 2")
    if _need(section, "coseg", "iters", int) < 0:
        raise ManifestError("coseg.iters: need >= 0")
    _need(section, "coseg", "seed", int)
    hyper_keys = {f for f in CosegHyper.__dataclass_fields__}
    for key in section:
        if key not in {"k", "iters"} | hyper_keys:
            raise ManifestError(f"coseg: unknown key {key!r}")


def validate_manifest(manifest: dict) -> None:
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    for stage in ("synth", "prior", "coseg"):
        if stage not in manifest:
            raise ManifestError(f"manifest: missing section {stage!r}")
        if not isinstance(manifest[stage], dict):
            raise ManifestError(f"manifest.{stage}: must be an object")
    _validate_synth(manifest["synth"])
    _validate_prior(manifest["prior"])
    _validate_coseg(manifest["coseg"])


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    validate_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# CSV artifacts (shared with the CLI)


def write_trace_csv(trace: list[TraceRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(f"{row.iteration},{row.rank_term!r},{row.contrastive_term!r},"
                     f"{row.completeness_term!r},{row.total!r}\n")


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError(f"{path}: not an energy-trace CSV")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 5:
            raise ValueError(f"{path}: line {lineno}: expected 5 fields")
        rows.append(TraceRow(int(fields[0]), *(float(v) for v in fields[1:])))
    return rows


def write_probe_csv(report, path: str | Path) -> None:
    with open(path, "w") as fh:
        for note in report.skipped:
            fh.write(f"# skipped: {note}\n")
        fh.write(PROBE_HEADER + "\n")
        for row in report.rows:
            fh.write(f"{row.label_count},{row.sample_index},"
                     f"{row.sigma2_score!r},{row.mse_score!r}\n")


# ---------------------------------------------------------------------------
# pipeline stages


class _Status:
    """Mirror of the run's progress, flushed to status.json after every
    transition so an aborted run leaves an honest 'incomplete' marker."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "status.json"
        self.stages = {name: {"state": "pending"} for name in STAGES}
        self.complete = False
        self.flush()

    def flush(self) -> None:
        payload = {"complete": self.complete, "stages": self.stages}
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def run(self, name: str, fn):
        self.stages[name] = {"state": "running"}
        self.flush()
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            self.stages[name] = {"state": "failed", "error": str(exc)}
            self.flush()
            raise StageError(name, exc) from exc
        seconds = time.perf_counter() - start
        self.stages[name] = {"state": "complete", "seconds": round(seconds, 3)}
        self.flush()
        return result

    def finish(self) -> None:
        self.complete = True
        self.flush()

    def seconds(self) -> dict[str, float]:
        return {name: info["seconds"] for name, info in self.stages.items()
                if info.get("state") == "complete"}


def _stage_synth(manifest: dict, out_dir: Path) -> tuple[ShapeSet, int]:
    cfg = manifest["synth"]
    shape_dir = out_dir / "shapes"
    shape_dir.mkdir(parents=True, exist_ok=True)
    clouds, gts = [], []
    meta = []
    for i in range(cfg["count"]):
        spec = SynthSpec(
            family=cfg["family"],
            n_points=cfg["n_points"],
            with_arms=cfg.get("with_arms", True),
            jitter=cfg.get("jitter", 0.0),
            seed=cfg["seed_base"] + i,
        )
        cloud, gt = synth_shape(spec)
        save_pointcloud(cloud, shape_dir / f"shape_{i:03d}.xyz")
        save_labeling(gt, shape_dir / f"shape_{i:03d}.gt.txt")
        clouds.append(cloud)
        gts.append(gt)
        meta.append({"file": f"shape_{i:03d}.xyz", "seed": spec.seed,
                     "gt": f"shape_{i:03d}.gt.txt"})
    (shape_dir / "meta.json").write_text(json.dumps(
        {"family": cfg["family"], "n_points": cfg["n_points"], "shapes": meta},
        indent=2, sort_keys=True) + "\n")
    gt_k = max(gt.k_bound for gt in gts)
    return ShapeSet(shapes=clouds, ground_truth=gts), gt_k


def prior_training_dataset(cfg: dict) -> list[tuple]:
    """Clean (cloud, part mask) pairs from synthetic shapes; corruption is
    applied inside the training loop, not here."""
    dataset = []
    for fam_index, family in enumerate(cfg["families"]):
        for s in range(cfg["shapes_per_family"]):
            # family blocks get disjoint seed ranges so adding a family
            # never reshuffles another family's shapes
            spec = SynthSpec(family=family, n_points=cfg["n_points"],
                             seed=cfg["seed_base"] + 1000 * fam_index + s)
            cloud, gt = synth_shape(spec)
            for label in sorted(gt.labels_used()):
                flags = np.asarray(gt.labels) == label
                if flags.all():
                    continue  # a mask with no background is untrainable
                dataset.append((cloud, BinaryMask(flags=flags)))
    return dataset


def _stage_prior(manifest: dict, out_dir: Path, base_dir: Path):
    cfg = manifest["prior"]
    prior_dir = out_dir / "prior"
    prior_dir.mkdir(parents=True, exist_ok=True)
    target = prior_dir / "prior.ckpt"
    if "checkpoint" in cfg:
        source = Path(cfg["checkpoint"])
        if not source.is_absolute():
            source = base_dir / source
        weights = load_prior(source)  # validate before copying
        shutil.copyfile(source, target)
        return weights
    hyper = PriorHyper(
        learning_rate=cfg.get("learning_rate", 1e-3),
        batch_size=cfg.get("batch_size", 4),
        steps=cfg["steps"],
        corruption_low=cfg.get("corruption_low", 0.20),
        corruption_high=cfg.get("corruption_high", 0.30),
        seed=cfg["seed"],
        classifier_hidden=cfg.get("classifier_hidden", 128),
    )
    dataset = prior_training_dataset(cfg)
    weights, curve = train_prior(
        dataset, hyper,
        radii=tuple(cfg.get("radii", DEFAULT_RADII)),
        neighbor_cap=cfg.get("neighbor_cap", DEFAULT_NEIGHBOR_CAP),
    )
    save_prior(weights, target)
    with open(prior_dir / "loss_curve.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")
    return weights


def _stage_coseg(manifest: dict, out_dir: Path, shape_set: ShapeSet,
                 prior_weights) -> CosegResult:
    cfg = dict(manifest["coseg"])
    k = cfg.pop("k")
    iters = cfg.pop("iters")
    hyper = CosegHyper(max_iters=iters, **cfg)
    result = cosegment(shape_set, k, prior_weights, hyper)
    coseg_dir = out_dir / "coseg"
    coseg_dir.mkdir(parents=True, exist_ok=True)
    for i, labeling in enumerate(result.labelings):
        save_labeling(labeling, coseg_dir / f"labels_{i:03d}.txt")
    write_trace_csv(result.trace, coseg_dir / "trace.csv")
    (coseg_dir / "result.json").write_text(json.dumps({
        "final_energy": result.final_energy,
        "iterations": result.iterations,
        "labels_used": sorted(result.labels_used),
        "restarted": result.restarted,
    }, indent=2, sort_keys=True) + "\n")
    return result


def _stage_eval(out_dir: Path, shape_set: ShapeSet,
                result: CosegResult) -> tuple[list[float], list[str]]:
    eval_dir = out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    scores = []
    lines = []
    with open(eval_dir / "report.csv", "w") as fh:
        fh.write("shape,n_points,score,pairs_agreeing\n")
        for i, (pred, gt) in enumerate(zip(result.labelings,
                                           shape_set.ground_truth)):
            report = rand_index(pred, gt)
            scores.append(report.score)
            fh.write(f"{i},{report.n_points},{report.score!r},"
                     f"{report.pairs_agreeing}\n")
            mapping = map_labels_by_overlap(pred, gt)
            lines.append(f"shape {i:03d}: agreement score {report.score:.4f} "
                         f"(label map {mapping})")
    return scores, lines


def run_experiment(manifest: dict | str | Path, out_dir: str | Path) -> ExperimentReport:
    """Execute every stage, writing artifacts under out_dir.

    Raises ManifestError before touching disk when the manifest is invalid,
    StageError when a stage fails mid-flight (status.json then shows which).
    """
    base_dir = Path.cwd()
    if isinstance(manifest, (str, Path)):
        base_dir = Path(manifest).resolve().parent
        manifest = load_manifest(manifest)
    else:
        validate_manifest(manifest)
    if manifest["coseg"].get("ablate") is not None:
        # fail fast: CosegHyper would reject it only at the coseg stage
        CosegHyper(ablate=manifest["coseg"]["ablate"])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    status = _Status(out_dir)

    shape_set, _ = status.run("synth", lambda: _stage_synth(manifest, out_dir))
    weights = status.run("prior", lambda: _stage_prior(manifest, out_dir, base_dir))
    result = status.run("coseg", lambda: _stage_coseg(manifest, out_dir,
                                                      shape_set, weights))
    scores, eval_lines = status.run("eval", lambda: _stage_eval(out_dir, shape_set,
                                                                result))
    status.finish()

    initial = result.trace[0].total if result.trace else result.final_energy
    report = ExperimentReport(
        name=str(manifest.get("name", "experiment")),
        out_dir=out_dir,
        ri_scores=scores,
        mean_ri=float(np.mean(scores)),
        initial_energy=initial,
        final_energy=result.final_energy,
        stage_seconds=status.seconds(),
    )
    _write_summary(out_dir, report, result, eval_lines)
    return report


def _write_summary(out_dir: Path, report: ExperimentReport,
                   result: CosegResult, eval_lines: list[str]) -> None:
    lines = [
        f"experiment: {report.name}",
        f"shapes: {len(report.ri_scores)}",
        "",
        *eval_lines,
        "",
        f"mean agreement score: {report.mean_ri:.4f} (lower is better)",
        f"energy: initial {report.initial_energy:.6f} -> "
        f"final {report.final_energy:.6f} over {result.iterations} iterations"
        + (" (restarted once)" if result.restarted else ""),
        "",
        "wall clock:",
        *(f"  {name}: {secs:.2f} s" for name, secs in report.stage_seconds.items()),
        "",
    ]
    (out_dir / "eval" / "summary.txt").write_text("\n".join(lines))
