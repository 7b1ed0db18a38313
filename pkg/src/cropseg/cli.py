"""Command-line entry point for all batch workflows and the review service.

Exit codes: 0 success, 1 validation error (bad flags or inputs), 2 runtime
failure. Diagnostics go to standard error; machine output goes to files or
standard output as JSON. Every file is written to a temporary and renamed,
so failures never leave partial outputs behind.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import pseudolabel as pl
from .fade import grad_check
from .metrics import aggregate, default_biou_radius
from .pseudolabel import BinaryMask, DegenerateFitError, PseudoLabelOptions
from .raster import Raster2D, RasterIOError, load_gray, save_gray
from .selftrain import TrainOptions, build_trimap, run_two_stage

DEPTH_SUFFIXES = (".pgm", ".pfm", ".png")


class CliError(ValueError):
    """Input validation failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _atomic_raster(raster: Raster2D, path: Path, format: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        save_gray(raster, tmp, format=format)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _atomic_text(text: str, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} {path!r} is not a directory")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} {path!r} does not exist")
    return p


def cmd_pseudolabel(args) -> int:
    depth_dir = _require_dir(args.depth_dir, "--depth-dir")
    if args.rule not in pl.THRESHOLD_RULES:
        raise CliError(f"unknown rule {args.rule!r}")
    if args.polarity not in (pl.CLOSER_IS_LARGER, pl.CLOSER_IS_SMALLER):
        raise CliError(f"unknown polarity {args.polarity!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = PseudoLabelOptions(
        bins=args.bins, lam=getattr(args, "lambda"), rule=args.rule, polarity=args.polarity
    )
    files = sorted(p for p in depth_dir.iterdir() if p.suffix.lower() in DEPTH_SUFFIXES)
    if not files:
        raise CliError(f"no depth files ({'/'.join(DEPTH_SUFFIXES)}) in {depth_dir}")
    rows = []
    degenerate = 0
    for path in files:
        depth = load_gray(path)
        try:
            mask, report = pl.depth_to_mask(depth, opts)
        except DegenerateFitError as exc:
            degenerate += 1
            doc = exc.report.to_dict() if exc.report else {}
            doc["error"] = str(exc)
            _atomic_text(json.dumps(doc, indent=2) + "\n", out / f"{path.stem}_report.json")
            print(f"{path.name}: {exc}", file=sys.stderr)
            continue
        _atomic_raster(mask.raster, out / f"{path.stem}_mask.png", "png")
        _atomic_text(
            json.dumps(report.to_dict(), indent=2) + "\n", out / f"{path.stem}_report.json"
        )
        rows.append((path.stem, report.threshold, report.coverage))

    buf = ["sample,threshold,coverage"]
    buf += [f"{stem},{t:.6f},{cov:.6f}" for stem, t, cov in rows]
    _atomic_text("\n".join(buf) + "\n", out / "summary.csv")
    if rows:
        from .plots import plot_coverage_histogram

        counts = [0] * corpus_mod.COVERAGE_BINS
        for _, _, cov in rows:
            counts[min(int(cov * corpus_mod.COVERAGE_BINS), corpus_mod.COVERAGE_BINS - 1)] += 1
        hist = corpus_mod.CoverageHistogram(counts=tuple(counts), total=len(rows))
        plot_coverage_histogram(hist, out / "coverage_hist.png")
    print(
        json.dumps({"processed": len(rows), "degenerate": degenerate, "out": str(out)})
    )
    return 0


def cmd_trimap(args) -> int:
    pseudo = BinaryMask(load_gray(_require_file(args.pseudo, "--pseudo")))
    pred = BinaryMask(load_gray(_require_file(args.pred, "--pred")))
    trimap = build_trimap(pseudo, pred)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_raster(trimap.raster, out, "png")
    print(json.dumps({"out": str(out), "ignore_fraction": trimap.ignore_fraction}))
    return 0


def _collect_pairs(pred_path: Path, gt_path: Path) -> list[tuple[BinaryMask, Raster2D]]:
    if pred_path.is_file() and gt_path.is_file():
        return [(BinaryMask(load_gray(pred_path)), load_gray(gt_path))]
    if pred_path.is_dir() and gt_path.is_dir():
        pairs = []
        for p in sorted(pred_path.iterdir()):
            g = gt_path / p.name
            if p.suffix.lower() in DEPTH_SUFFIXES and g.is_file():
                pairs.append((BinaryMask(load_gray(p)), load_gray(g)))
        if not pairs:
            raise CliError(f"no matching mask files between {pred_path} and {gt_path}")
        return pairs
    raise CliError("--pred and --gt must both be files or both be directories")


def cmd_eval(args) -> int:
    pairs = _collect_pairs(Path(args.pred), Path(args.gt))
    radius = args.biou_radius
    if radius is not None and radius < 1:
        raise CliError("--biou-radius must be >= 1")
    report = aggregate(pairs, radius=radius)
    doc = report.to_dict()
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_text(json.dumps(doc, indent=2) + "\n", path)
    print("miou\tiou_fg\tiou_bg\tbiou\timages")
    print(
        f"{doc['miou']:.2f}\t{doc['iou_fg']:.2f}\t{doc['iou_bg']:.2f}"
        f"\t{doc['biou']:.2f}\t{doc['images']}"
    )
    return 0


def cmd_stats(args) -> int:
    manifest = corpus_mod.load_manifest(_require_file(args.manifest, "--manifest"))
    if args.journal:
        manifest = corpus_mod.replay_journal(args.journal, manifest)
    hist = corpus_mod.coverage_stats(manifest)
    by_status = {s: 0 for s in corpus_mod.STATUSES}
    for s in manifest.samples:
        by_status[s.status] += 1
    doc = {"status_counts": by_status, "coverage": hist.to_dict()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(json.dumps(doc, indent=2) + "\n", out / "stats.json")
    buf = ["bin_lo,bin_hi,count"]
    edges = np.linspace(0.0, 1.0, len(hist.counts) + 1)
    buf += [
        f"{edges[i]:.2f},{edges[i + 1]:.2f},{hist.counts[i]}" for i in range(len(hist.counts))
    ]
    _atomic_text("\n".join(buf) + "\n", out / "coverage.csv")
    from .plots import plot_coverage_histogram

    plot_coverage_histogram(hist, out / "coverage_hist.png")
    print(json.dumps(doc))
    return 0


def cmd_selftrain(args) -> int:
    manifest = corpus_mod.load_manifest(_require_file(args.manifest, "--manifest"))
    opts = TrainOptions(epochs=args.epochs, lr=args.lr, seed=args.seed)
    report1, report2 = run_two_stage(manifest, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"stage1": report1.to_dict(), "stage2": report2.to_dict()}
    _atomic_text(json.dumps(doc, indent=2) + "\n", out / "selftrain.json")
    from .plots import plot_loss_curves

    plot_loss_curves([report1, report2], out / "loss_curves.png")
    print(
        json.dumps(
            {
                "stage1_miou": report1.eval_miou,
                "stage2_miou": report2.eval_miou,
                "ignore_fraction": report2.ignore_fraction,
            }
        )
    )
    return 0


def cmd_fade_check(args) -> int:
    report = grad_check(
        C=args.c, h=getattr(args, "h"), w=args.w, K=args.k, Cm=args.cm,
        seed=args.seed, eps=args.eps,
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    manifest_path = _require_file(args.manifest, "--manifest")
    app = create_app(
        manifest_path=str(manifest_path),
        journal_path=args.journal,
        static_dir=args.static_dir,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cropseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pseudolabel", help="depth maps to pseudo-masks")
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--lambda", type=float, default=4.0)
    p.add_argument("--rule", default="max_curvature_auto")
    p.add_argument("--polarity", default=pl.CLOSER_IS_LARGER)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("trimap", help="pseudo + prediction to trimap")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trimap)

    p = sub.add_parser("eval", help="masks vs ground truth metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--biou-radius", type=int, default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="corpus status and coverage statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--journal", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("selftrain", help="two-stage self-training on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("fade-check", help="FADE gradient verification")
    p.add_argument("--c", type=int, default=3)
    p.add_argument("--cm", type=int, default=8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--h", type=int, default=4)
    p.add_argument("--w", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_fade_check)

    p = sub.add_parser("serve", help="launch the mask review service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--journal", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static-dir", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cropseg: {exc}", file=sys.stderr)
        return 1
    except (OSError, RasterIOError, ValueError) as exc:
        print(f"cropseg: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
