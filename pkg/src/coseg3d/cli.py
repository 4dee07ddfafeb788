"""Command-line surface.

Subcommands cover the whole pipeline piecemeal (synth, train-prior, coseg,
eval, rank-probe, plot) or end to end from a manifest (run). Exit codes:
0 success, 1 validation error (bad arguments or inputs), 2 runtime failure
(collapse, stage abort). Every command validates its inputs before writing
anything.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .coseg import CosegCollapseError, CosegHyper, cosegment, part_descriptor
from .data import BinaryMask, ShapeSet, load_labeling, load_pointcloud, \
    save_labeling, save_pointcloud
from .encoders import DEFAULT_NEIGHBOR_CAP, msg_encode
from .manifest import ManifestError, StageError, prior_training_dataset, \
    read_trace_csv, run_experiment, write_probe_csv, write_trace_csv
from .metrics import rand_index, rank_probe
from .prior import PriorHyper, load_prior, save_prior, train_prior
from .synth import FAMILIES, SynthSpec, synth_shape

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract reserves 2 for runtime
    failures, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# input loading helpers


def _load_set_dir(path: Path) -> tuple[list, list[Path]]:
    if not path.is_dir():
        raise ValueError(f"{path}: not a directory")
    files = sorted(path.glob("*.xyz"))
    if len(files) < 2:
        raise ValueError(f"{path}: need >= 2 .xyz files, found {len(files)}")
    clouds = [load_pointcloud(f)[0] for f in files]
    return clouds, files


def _label_files(path: Path) -> list[Path]:
    if not path.is_dir():
        raise ValueError(f"{path}: not a directory")
    gt = sorted(path.glob("*.gt.txt"))
    if gt:
        return gt
    plain = sorted(p for p in path.glob("*.txt") if not p.name.endswith(".gt.txt"))
    if not plain:
        raise ValueError(f"{path}: no label files (*.txt)")
    return plain


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = SynthSpec(family=args.family, n_points=args.n_points,
                         with_arms=not args.no_arms, jitter=args.jitter,
                         seed=args.seed_base + i)
        cloud, gt = synth_shape(spec)
        save_pointcloud(cloud, out / f"shape_{i:03d}.xyz")
        save_labeling(gt, out / f"shape_{i:03d}.gt.txt")
    print(f"wrote {args.count} {args.family} shapes to {out}")
    return 0


def _cmd_train_prior(args) -> int:
    cfg = {
        "families": args.families.split(","),
        "shapes_per_family": args.shapes_per_family,
        "n_points": args.n_points,
        "seed_base": args.shape_seed_base,
    }
    for fam in cfg["families"]:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}, want one of {FAMILIES}")
    hyper = PriorHyper(steps=args.steps, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, seed=args.seed,
                       corruption_low=args.corruption_low,
                       corruption_high=args.corruption_high)
    dataset = prior_training_dataset(cfg)
    print(f"training on {len(dataset)} (shape, part) pairs "
          f"for {hyper.steps} steps")
    weights, curve = train_prior(dataset, hyper,
                                 neighbor_cap=args.neighbor_cap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior(weights, out)
    if args.curve:
        with open(args.curve, "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(curve):
                fh.write(f"{i},{v!r}\n")
    tail = float(np.mean(curve[-50:])) if curve else float("nan")
    print(f"saved prior to {out} (final-50 mean loss {tail:.4f})")
    return 0


def _cmd_coseg(args) -> int:
    clouds, files = _load_set_dir(Path(args.set))
    prior_weights = load_prior(args.prior)
    hyper = CosegHyper(
        max_iters=args.iters,
        learning_rate=args.learning_rate,
        lambda_completeness=getattr(args, "lambda"),
        include_coords=args.coords,
        seed=args.seed,
        ablate=args.ablate,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = cosegment(ShapeSet(shapes=clouds), args.k, prior_weights, hyper)
    for src, labeling in zip(files, result.labelings):
        save_labeling(labeling, out / (src.stem + ".labels.txt"))
    write_trace_csv(result.trace, out / "trace.csv")
    (out / "result.json").write_text(json.dumps({
        "final_energy": result.final_energy,
        "iterations": result.iterations,
        "labels_used": sorted(result.labels_used),
        "restarted": result.restarted,
    }, indent=2, sort_keys=True) + "\n")
    print(f"cosegmented {len(clouds)} shapes: final energy "
          f"{result.final_energy:.6f}, labels used {sorted(result.labels_used)}")
    return 0


def _cmd_eval(args) -> int:
    pred_files = _label_files(Path(args.pred))
    gt_files = _label_files(Path(args.gt))
    if len(pred_files) != len(gt_files):
        raise ValueError(f"prediction count {len(pred_files)} != "
                         f"ground truth count {len(gt_files)}")
    scores = []
    rows = []
    for pf, gf in zip(pred_files, gt_files):
        pred = load_labeling(pf)
        gt = load_labeling(gf)
        report = rand_index(pred, gt)
        scores.append(report.score)
        rows.append((pf.name, report))
        print(f"{pf.name} vs {gf.name}: {report.score:.4f}")
    mean = float(np.mean(scores))
    print(f"mean agreement score: {mean:.4f} (lower is better)")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("file,n_points,score,pairs_agreeing\n")
            for name, report in rows:
                fh.write(f"{name},{report.n_points},{report.score!r},"
                         f"{report.pairs_agreeing}\n")
    return 0


def _part_pool(clouds, labelings, prior_weights):
    """(descriptor, label) pairs from hard part masks, for the rank probe."""
    pool = []
    for cloud, labeling in zip(clouds, labelings):
        labeling.check_for(cloud)
        field = msg_encode(cloud, prior_weights.msg).detach()
        for label in sorted(labeling.labels_used()):
            weights_vec = (np.asarray(labeling.labels) == label).astype(float)
            desc = part_descriptor(cloud, ad.constant(weights_vec),
                                   prior_weights, msg_field=field)
            pool.append((desc.data.copy(), int(label)))
    return pool


def _cmd_rank_probe(args) -> int:
    clouds, files = _load_set_dir(Path(args.set))
    label_files = _label_files(Path(args.labels))
    if len(label_files) != len(files):
        raise ValueError(f"label file count {len(label_files)} != "
                         f"shape count {len(files)}")
    prior_weights = load_prior(args.prior)
    labelings = [load_labeling(f) for f in label_files]
    pool = _part_pool(clouds, labelings, prior_weights)
    sizes = tuple(int(v) for v in args.sizes.split(","))
    report = rank_probe(pool, subset_sizes=sizes,
                        samples_per_subset=args.samples, seed=args.seed,
                        collection_size=args.collection_size)
    write_probe_csv(report, args.out)
    for note in report.skipped:
        print(f"note: skipped {note}")
    for count, (lo, hi) in sorted(report.sigma2_summary().items()):
        print(f"{count}-label collections: sigma2 in [{lo:.4f}, {hi:.4f}]")
    print(f"wrote {len(report.rows)} probe rows to {args.out}")
    return 0


def _cmd_run(args) -> int:
    report = run_experiment(args.manifest, args.out)
    print(f"experiment {report.name!r} complete in {report.out_dir}")
    for name, secs in report.stage_seconds.items():
        print(f"  {name}: {secs:.2f} s")
    print(f"mean agreement score {report.mean_ri:.4f}; energy "
          f"{report.initial_energy:.4f} -> {report.final_energy:.4f}")
    return 0


def _cmd_plot(args) -> int:
    from . import svgplot

    if (args.trace is None) == (args.probe is None):
        raise ValueError("pass exactly one of --trace or --probe")
    if args.trace:
        trace = read_trace_csv(args.trace)
        if not trace:
            raise ValueError(f"{args.trace}: empty trace, nothing to plot")
        series = {
            "total": [(r.iteration, r.total) for r in trace],
            "rank term": [(r.iteration, r.rank_term) for r in trace],
            "completeness": [(r.iteration, r.completeness_term) for r in trace],
        }
        contrast = [(r.iteration, r.contrastive_term) for r in trace
                    if not np.isnan(r.contrastive_term)]
        if len(contrast) >= 2:
            series["contrastive term"] = contrast
        svg = svgplot.line_chart(series, title="co-segmentation energy",
                                 x_label="iteration", y_label="energy")
    else:
        lines = Path(args.probe).read_text().splitlines()
        rows = [line.split(",") for line in lines
                if line and not line.startswith("#")][1:]
        if not rows:
            raise ValueError(f"{args.probe}: no probe rows")
        groups: dict[str, list[tuple[float, float]]] = {}
        for i, fields in enumerate(rows):
            groups.setdefault(f"{fields[0]} labels", []).append(
                (float(i), float(fields[2])))
        svg = svgplot.scatter_chart(groups, title="rank probe",
                                    x_label="sampled collection",
                                    y_label="second singular value")
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coseg3d",
                     description="adaptive point-cloud set co-segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape set")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--seed-base", type=int, required=True)
    p.add_argument("--no-arms", action="store_true")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train-prior", help="train the binary part prior")
    p.add_argument("--families", default="two_box,chair_like")
    p.add_argument("--shapes-per-family", type=int, default=8)
    p.add_argument("--n-points", type=int, default=128)
    p.add_argument("--shape-seed-base", type=int, default=100)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--corruption-low", type=float, default=0.20)
    p.add_argument("--corruption-high", type=float, default=0.30)
    p.add_argument("--neighbor-cap", type=int, default=DEFAULT_NEIGHBOR_CAP)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--curve", help="optional loss-curve CSV path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train_prior)

    p = sub.add_parser("coseg", help="co-segment a shape set")
    p.add_argument("--set", required=True, help="directory of .xyz files")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--prior", required=True, help="prior checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", type=float, default=1.0,
                   help="completeness weight")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", action="store_true",
                   help="classifier also reads raw point coordinates")
    p.add_argument("--ablate", choices=("no-prior", "no-contrastive",
                                        "no-completeness", "mrg-parts"))
    p.set_defaults(fn=_cmd_coseg)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="optional CSV report path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("rank-probe", help="rank-discriminativeness probe")
    p.add_argument("--set", required=True)
    p.add_argument("--labels", required=True,
                   help="directory of per-shape label files")
    p.add_argument("--prior", required=True)
    p.add_argument("--sizes", default="1,2,3",
                   help="comma-separated label-subset sizes")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--collection-size", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_rank_probe)

    p = sub.add_parser("run", help="run a manifest end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("plot", help="emit an SVG chart")
    p.add_argument("--trace", help="energy-trace CSV from coseg")
    p.add_argument("--probe", help="rank-probe CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ManifestError, ValueError, FileNotFoundError, OSError) as exc:
        return _fail(str(exc), 1)
    except (CosegCollapseError, StageError) as exc:
        return _fail(str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
