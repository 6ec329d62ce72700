"""Command-line entry point: ``rdseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .eed import EedParams, eed_filter
from .imaging import resize_bilinear, resize_nearest
from .metrics import compute_metrics, confusion_counts, report, summary_table
from .network import ModelConfig
from .phantom import write_phantom_dataset
from .pipeline import THRESHOLD, overlay, run_cascade
from .training import TrainConfig, normalize_patch, train, write_loss_log

log = logging.getLogger("rdseg")


def _add_eed_args(p: argparse.ArgumentParser) -> None:
    d = EedParams()
    p.add_argument("--sigma", type=float, default=d.sigma, help="gradient pre-smoothing scale (px)")
    p.add_argument("--rho", type=float, default=d.rho, help="structure-tensor integration scale (px)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="edge contrast threshold (default: 5%% of the ROI intensity range)")
    p.add_argument("--tau", type=float, default=d.tau, help="explicit time step, at most 0.2")
    p.add_argument("--steps", type=int, default=d.steps, help="iterations (0 disables filtering)")


def _eed_from(args) -> EedParams:
    return EedParams(sigma=args.sigma, rho=args.rho, lam=args.lam, tau=args.tau, steps=args.steps)


def cmd_synth(args) -> None:
    recs = write_phantom_dataset(args.out, args.count, args.size, args.lesions, args.seed, args.test_count)
    print(f"wrote {len(recs)} phantoms and manifest.json to {args.out}")


def cmd_eed(args) -> None:
    params = _eed_from(args)
    out = eed_filter(io.read_raster(args.inp), params)
    fmt = "pgm16" if Path(args.out).suffix.lower() == ".pgm" else "imgf32"
    if fmt == "pgm16":
        out = np.clip(out, 0.0, 1.0)
    io.write_raster(args.out, out, fmt)


def cmd_train(args) -> None:
    manifest = io.load_manifest(args.manifest)
    mcfg = ModelConfig(levels=args.levels, base_channels=args.base_channels)
    tcfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed, patch_size=args.patch_size
    )
    result = train(args.stage, manifest, mcfg, tcfg, _eed_from(args))
    io.save_checkpoint(args.out, result.model, tcfg)
    log_path = args.loss_log or f"{args.out}.loss.tsv"
    write_loss_log(log_path, result.losses)
    print(f"{args.stage}: final mean loss {result.losses[-1][1]:.6f}; checkpoint {args.out}; log {log_path}")


def _predict_mask(model, image: np.ndarray) -> np.ndarray:
    size = tuple(model.input_size) if model.input_size else image.shape
    prob = model.predict(normalize_patch(resize_bilinear(image, size)))
    return resize_nearest(prob >= THRESHOLD, image.shape)


def cmd_infer(args) -> None:
    model = io.load_checkpoint(args.ckpt)
    io.write_mask(args.out, _predict_mask(model, io.read_raster(args.inp)))


def cmd_pipeline(args) -> None:
    eed = _eed_from(args)
    lung_model = io.load_checkpoint(args.lung_ckpt)
    infection_model = io.load_checkpoint(args.infection_ckpt)
    image = io.read_raster(args.inp)
    result = run_cascade(image, lung_model, infection_model, eed)
    prefix = args.out_prefix
    io.write_mask(f"{prefix}_lung.pgm", result.lung_mask)
    io.write_mask(f"{prefix}_infection.pgm", result.infection_mask)
    if args.overlay:
        io.write_ppm(f"{prefix}_overlay.ppm", overlay(image, result.lung_mask, result.infection_mask))
    if result.lung_empty:
        print("warning: no lung detected; infection mask is empty", file=sys.stderr)
    lung_px = int(result.lung_mask.sum())
    inf_px = int(result.infection_mask.sum())
    print(f"lung pixels {lung_px}, infection pixels {inf_px}, roi {result.roi_box}")


def evaluate_manifests(pred: io.Manifest, gt: io.Manifest) -> dict[str, list]:
    """Per-task case metrics for every ground-truth sample that has a prediction."""
    preds = pred.by_id()
    tasks: dict[str, list] = {"lung": [], "infection": []}
    for s in gt.samples:
        p = preds.get(s.id)
        if p is None:
            raise ValueError(f"no prediction for sample {s.id}")
        for task, gt_path, pred_path in (
            ("lung", s.lung_mask_path, p.lung_mask_path),
            ("infection", s.infection_mask_path, p.infection_mask_path),
        ):
            if gt_path is None or pred_path is None:
                continue
            c = confusion_counts(io.read_mask(pred.resolve(pred_path)), io.read_mask(gt.resolve(gt_path)))
            tasks[task].append(compute_metrics(c, s.id))
    return {k: v for k, v in tasks.items() if v}


def cmd_eval(args) -> None:
    tasks = evaluate_manifests(io.load_manifest(args.pred_manifest), io.load_manifest(args.gt_manifest))
    if not tasks:
        raise ValueError("no comparable masks between the two manifests")
    Path(args.out).write_text(json.dumps(report(tasks), indent=2) + "\n", encoding="utf-8")
    table = summary_table(tasks)
    Path(f"{args.out}.tsv").write_text(table, encoding="utf-8")
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdseg", description="Cascaded lung/infection CT segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--lesions", default="0..3", help="lesions per slice, N or LO..HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0, help="trailing samples placed in the test split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eed", help="edge-enhancing diffusion on one raster")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_eed_args(p)
    p.set_defaults(func=cmd_eed)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", choices=("lung", "infection"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=None, help="default 32 (lung) / 16 (infection)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--loss-log", default=None, help="default <out>.loss.tsv")
    _add_eed_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="single-stage forward pass")
    p.add_argument("--stage", choices=("lung", "infection"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pipeline", help="full lung -> infection cascade")
    p.add_argument("--lung-ckpt", required=True)
    p.add_argument("--infection-ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--overlay", action="store_true", help="also write <prefix>_overlay.ppm")
    _add_eed_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="DSC / sensitivity / specificity report")
    p.add_argument("--pred-manifest", required=True)
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--out", required=True, help="JSON report; a .tsv summary is written alongside")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"rdseg {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
