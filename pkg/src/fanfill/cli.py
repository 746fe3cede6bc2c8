"""Command-line entry point: dataset prep, training, outpainting, evaluation.

Subcommands: make-synthetic, prepare-data, train, outpaint, evaluate,
stats-compare, plot. A YAML config file supplies defaults; explicit flags
always win. Every run writes a run.json provenance record into its output
directory. Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml

import fanfill
from fanfill.data import Manifest, build_manifest, load_frame, make_synthetic_dataset
from fanfill.geometry import DetectionError
from fanfill.losses import load_feature_extractor
from fanfill.metrics import MetricReport, contact_sheet, evaluate, load_fid_features
from fanfill.networks import load_checkpoint
from fanfill.outpaint import batch_outpaint, load_index, outpaint
from fanfill.area_stats import run_study
from fanfill.training import TrainConfig, fit

logger = logging.getLogger(__name__)

# Config file schema: key -> (type, default). Flags override file values.
CONFIG_SCHEMA = {
    "steps": (int, 500),
    "batch_size": (int, 16),
    "lr_g": (float, 2e-4),
    "lr_d": (float, 2e-4),
    "adam_beta1": (float, 0.5),
    "adam_beta2": (float, 0.999),
    "seed": (int, 0),
    "checkpoint_every": (int, 100),
    "height": (int, 128),
    "width": (int, 128),
    "d_steps_per_g_step": (int, 1),
    "split_fraction": (float, 0.8),
    "lpips_weights": (str, None),
    "lpips_layer_weights": (str, None),
    "fid_weights": (str, None),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is exit 1
    # with the offending flag named.
    def error(self, message):
        raise UsageError(message)


def load_config(path: str | Path | None) -> dict:
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is None:
        return values
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return values
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must be a mapping of keys to values")
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"unknown config key {key!r} (known: {sorted(CONFIG_SCHEMA)})")
        want, _ = CONFIG_SCHEMA[key]
        if value is not None:
            try:
                value = want(value)
            except (TypeError, ValueError):
                raise ValueError(f"config key {key!r} must be {want.__name__}, got {value!r}")
        values[key] = value
    return values


def merge_config(args: argparse.Namespace) -> dict:
    """File values under flag overrides; flags use None as the 'unset' mark."""
    values = load_config(getattr(args, "config", None))
    for key in CONFIG_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def write_run_record(out_dir: Path, command: str, config: dict, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": fanfill.__version__,
        "config": {k: config.get(k) for k in sorted(config)},
        "argv": argv,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2))


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise ValueError(f"size must look like 128x128, got {text!r}")


def _parse_cuts(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"cuts must be comma-separated degrees, got {text!r}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (flags win over file values)")
    parser.add_argument("--seed", type=int, default=None, help="random seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="fanfill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a deterministic echo-like dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--frames-per-patient", type=int, default=4)
    p.add_argument("--size", default="128x128")
    p.add_argument("--split-fraction", type=float, default=None, dest="split_fraction")

    p = sub.add_parser("prepare-data", help="scan frames, detect fans, build the manifest")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-fraction", type=float, default=None, dest="split_fraction")

    p = sub.add_parser("train", help="run the adversarial training loop")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr-g", type=float, default=None, dest="lr_g")
    p.add_argument("--lr-d", type=float, default=None, dest="lr_d")
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--size", default=None, help="training resolution, e.g. 128x128")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--dump-augmented", type=int, default=0, dest="dump_augmented",
                   help="debug: write N augmented sample triplets as a grid before training")

    p = sub.add_parser("outpaint", help="outpaint the manifest's test split (or one frame)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="batch mode: manifest CSV")
    p.add_argument("--cuts", default="15", help="comma-separated side cuts in degrees")
    p.add_argument("--frame", help="single-frame mode: grayscale PNG")
    p.add_argument("--target-spread", type=float, default=90.0, dest="target_spread")
    p.add_argument("--save-raw", action="store_true", dest="save_raw",
                   help="debug: also save the uncomposited generator output")

    p = sub.add_parser("evaluate", help="compute the per-cut metric table from an index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("stats-compare", help="paired area study from a pairing CSV")
    _add_common(p)
    p.add_argument("--pairing", required=True)
    p.add_argument("--out", required=True, help="study JSON path")
    p.add_argument("--spacing", default=None, help="pixel spacing mm/px as 'row,col'")
    p.add_argument("--resamples", type=int, default=100_000)

    p = sub.add_parser("plot", help="write GT | input | outpainted contact sheets")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int, default=6, dest="max_frames")

    return parser


def _cmd_make_synthetic(args, argv) -> int:
    config = merge_config(args)
    h, w = _parse_size(args.size)
    out = Path(args.out)
    manifest = make_synthetic_dataset(
        n_patients=args.patients,
        frames_per_patient=args.frames_per_patient,
        seed=config["seed"],
        out=out,
        image_size=(h, w),
        split_fraction=config["split_fraction"],
    )
    write_run_record(out, "make-synthetic", config, argv)
    print(f"wrote {len(manifest.records)} frames to {out} (manifest.csv included)")
    return 0


def _cmd_prepare_data(args, argv) -> int:
    config = merge_config(args)
    out = Path(args.out)
    manifest = build_manifest(args.root, split_fraction=config["split_fraction"], seed=config["seed"])
    out.mkdir(parents=True, exist_ok=True)
    manifest.write_csv(out / "manifest.csv")
    write_run_record(out, "prepare-data", config, argv)
    print(
        f"manifest: {len(manifest.records)} frames "
        f"({len(manifest.split('train'))} train / {len(manifest.split('test'))} test, "
        f"{manifest.skipped} skipped) -> {out / 'manifest.csv'}"
    )
    return 0


def _cmd_train(args, argv) -> int:
    config = merge_config(args)
    if args.size is not None:
        config["height"], config["width"] = _parse_size(args.size)
    out = Path(args.out)
    manifest = Manifest.read_csv(args.manifest)
    train_config = TrainConfig(
        steps=config["steps"],
        batch_size=config["batch_size"],
        lr_g=config["lr_g"],
        lr_d=config["lr_d"],
        adam_beta1=config["adam_beta1"],
        adam_beta2=config["adam_beta2"],
        seed=config["seed"],
        checkpoint_every=config["checkpoint_every"],
        resolution=(config["height"], config["width"]),
        d_steps_per_g_step=config["d_steps_per_g_step"],
    )
    extractor = load_feature_extractor(
        config["lpips_weights"], seed=config["seed"],
        layer_weights_path=config["lpips_layer_weights"],
    )
    write_run_record(out, "train", config, argv)
    if args.dump_augmented > 0:
        from fanfill.augment import save_sample_grid
        from fanfill.data import load_split
        from fanfill.training import _make_batch

        frames = load_split(manifest, "train", train_config.resolution)
        if not frames:
            raise ValueError("manifest has an empty train split")
        preview = TrainConfig(**{**train_config.__dict__, "batch_size": args.dump_augmented})
        out.mkdir(parents=True, exist_ok=True)
        save_sample_grid(_make_batch(frames, preview, step=0), out / "augmented_samples.png")
    path = fit(train_config, manifest, out, extractor=extractor, resume_from=args.resume)
    print(f"final checkpoint: {path}")
    return 0


def _cmd_outpaint(args, argv) -> int:
    config = merge_config(args)
    out = Path(args.out)
    checkpoint = load_checkpoint(args.checkpoint)
    write_run_record(out, "outpaint", config, argv)
    if args.frame:
        from fanfill.data import FrameRecord
        from fanfill.geometry import detect_apex
        from fanfill.outpaint import _save_gray
        from PIL import Image
        import numpy as np

        arr = np.asarray(Image.open(args.frame).convert("L"), dtype=np.float64) / 255.0
        cone = detect_apex(arr)
        record = FrameRecord("cli", Path(args.frame).stem, Path(args.frame), "test", cone)
        frame = load_frame(record, tuple(checkpoint.resolution))
        extended, filled = outpaint(frame, checkpoint, args.target_spread)
        _save_gray(out / "extended.png", extended)
        Image.fromarray(filled * np.uint8(255), mode="L").save(out / "filled_mask.png")
        print(f"extended frame -> {out / 'extended.png'}")
        return 0
    if not args.manifest:
        raise ValueError("outpaint needs --manifest (batch mode) or --frame (single mode)")
    manifest = Manifest.read_csv(args.manifest)
    report = batch_outpaint(manifest, checkpoint, _parse_cuts(args.cuts), out,
                            save_raw=args.save_raw)
    print(
        f"outpainted {report['n_rows']} (frame, cut) pairs, "
        f"{len(report['errors'])} errors -> {report['index']}"
    )
    return 0


def _cmd_evaluate(args, argv) -> int:
    config = merge_config(args)
    out = Path(args.out)
    index = load_index(args.index)
    extractor = load_feature_extractor(
        config["lpips_weights"], seed=config["seed"],
        layer_weights_path=config["lpips_layer_weights"],
    )
    feature_model = load_fid_features(config["fid_weights"], seed=config["seed"])
    metadata = {
        "index": str(args.index),
        "checkpoint_step": index.get("checkpoint_step"),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    report = evaluate(index, extractor, feature_model, metadata=metadata)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    write_run_record(out.parent, "evaluate", config, argv)
    print(report.to_text())
    print(f"report -> {out}")
    return 0


def _cmd_stats_compare(args, argv) -> int:
    config = merge_config(args)
    out = Path(args.out)
    spacing = None
    if args.spacing:
        parts = [float(v) for v in args.spacing.split(",")]
        if len(parts) != 2:
            raise ValueError(f"--spacing needs two values, got {args.spacing!r}")
        spacing = (parts[0], parts[1])
    study = run_study(
        args.pairing, pixel_spacing=spacing,
        n_resamples=args.resamples, seed=config["seed"],
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    study.to_json(out)
    write_run_record(out.parent, "stats-compare", config, argv)
    print(study.to_text())
    print(f"study -> {out}")
    return 0


def _cmd_plot(args, argv) -> int:
    config = merge_config(args)
    out = Path(args.out)
    index = load_index(args.index)
    written = contact_sheet(index, out, max_frames=args.max_frames)
    write_run_record(out, "plot", config, argv)
    for path in written:
        print(f"sheet -> {path}")
    return 0


_COMMANDS = {
    "make-synthetic": _cmd_make_synthetic,
    "prepare-data": _cmd_prepare_data,
    "train": _cmd_train,
    "outpaint": _cmd_outpaint,
    "evaluate": _cmd_evaluate,
    "stats-compare": _cmd_stats_compare,
    "plot": _cmd_plot,
}


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, DetectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: IO, training aborts, ...
        logger.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
