"""Inference: widen a frame's fan with the generator and paste known pixels back.

The compositing contract is the hard guarantee here: wherever the retained
(input) mask is 1 the output pixel equals the input pixel bit-exactly; the
generator only ever contributes inside full_cone AND NOT retained.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from fanfill.data import Frame, Manifest, load_frame
from fanfill.geometry import ConeSpec, cut_region_mask, make_cone_mask, shrink_cone
from fanfill.networks import Checkpoint, Generator, generator_forward

logger = logging.getLogger(__name__)


def _generator_of(checkpoint: Checkpoint | Generator) -> Generator:
    if isinstance(checkpoint, Generator):
        return checkpoint
    gen, _ = checkpoint.build_models()
    return gen


def _composite(pixels: np.ndarray, generated: np.ndarray,
               retained: np.ndarray, full: np.ndarray) -> np.ndarray:
    fill = (full - retained).astype(pixels.dtype)
    return pixels * retained + generated * fill


def outpaint(
    frame: Frame,
    checkpoint: Checkpoint | Generator,
    target_spread_deg: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Extend a frame's fan to target_spread_deg.

    Returns (extended image, filled-region mask). The frame's own cone is the
    retained region; equality of target and current spread degenerates to the
    identity (empty filled region).
    """
    spread = frame.cone.spread_deg
    if target_spread_deg < spread:
        raise ValueError(
            f"target spread {target_spread_deg} deg is narrower than the "
            f"frame's {spread} deg fan"
        )
    if isinstance(checkpoint, Checkpoint) and tuple(checkpoint.resolution) != frame.pixels.shape:
        logger.warning(
            "checkpoint was trained at %s, frame is %s; the network is fully "
            "convolutional but quality may suffer",
            checkpoint.resolution, frame.pixels.shape,
        )
    full_spec = frame.cone.with_spread(target_spread_deg)
    full = make_cone_mask(full_spec)
    retained = make_cone_mask(frame.cone)
    generated = generator_forward(
        _generator_of(checkpoint),
        frame.pixels * retained,
        retained.astype(np.float32),
    )
    extended = _composite(frame.pixels, generated, retained, full)
    return extended, cut_region_mask(full, retained)


def _save_gray(path: Path, img01: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L").save(path)


def batch_outpaint(
    manifest: Manifest,
    checkpoint: Checkpoint,
    cut_deg_per_side: float | list[float],
    out: str | Path,
    save_raw: bool = False,
) -> dict:
    """Shrink each test frame by the cut, outpaint back, write quartets + index.

    Per frame and cut: ground truth (cone-masked original), input (shrunk
    fan), output (composited extension), and the filled-region mask, all as
    8-bit PNG; save_raw additionally dumps the uncomposited generator output.
    Per-frame failures are collected in the report instead of aborting the
    batch. Returns the report dict; the index at ``out/index.json`` carries
    one row per (frame, cut) with the full-cone spec embedded so downstream
    metrics can rebuild the fan footprint.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = manifest.split("test")
    if not records:
        raise ValueError("manifest has an empty test split")
    cuts = [float(c) for c in (cut_deg_per_side if isinstance(cut_deg_per_side, (list, tuple)) else [cut_deg_per_side])]

    generator = _generator_of(checkpoint)
    resolution = tuple(checkpoint.resolution)
    rows, errors = [], []
    for record in records:
        case = f"{record.patient_id}_{record.frame_id}"
        try:
            frame = load_frame(record, resolution)
        except (ValueError, OSError) as exc:
            errors.append({"case": case, "error": str(exc)})
            logger.warning("skipping %s: %s", case, exc)
            continue
        full = make_cone_mask(frame.cone)
        gt = frame.pixels * full
        for cut in cuts:
            try:
                shrunk_spec = shrink_cone(frame.cone, cut)
                retained = make_cone_mask(shrunk_spec)
                masked = gt * retained
                generated = generator_forward(generator, masked, retained.astype(np.float32))
                extended = _composite(gt, generated, retained, full)
                filled = cut_region_mask(full, retained)
            except ValueError as exc:
                errors.append({"case": case, "cut_deg": cut, "error": str(exc)})
                logger.warning("skipping %s at cut %.1f: %s", case, cut, exc)
                continue
            cut_dir = out / f"cut{cut:g}"
            cut_dir.mkdir(exist_ok=True)
            paths = {
                "gt": cut_dir / f"{case}_gt.png",
                "input": cut_dir / f"{case}_input.png",
                "output": cut_dir / f"{case}_output.png",
                "filled_mask": cut_dir / f"{case}_filled.png",
            }
            _save_gray(paths["gt"], gt)
            _save_gray(paths["input"], masked)
            _save_gray(paths["output"], extended)
            Image.fromarray(filled * np.uint8(255), mode="L").save(paths["filled_mask"])
            if save_raw:
                _save_gray(cut_dir / f"{case}_raw.png", generated)
            rows.append({
                "frame_id": case,
                "gt": paths["gt"].relative_to(out).as_posix(),
                "input": paths["input"].relative_to(out).as_posix(),
                "output": paths["output"].relative_to(out).as_posix(),
                "filled_mask": paths["filled_mask"].relative_to(out).as_posix(),
                "cut_deg": cut,
                "cone": frame.cone.to_dict(),
            })

    index_path = out / "index.json"
    index_path.write_text(json.dumps({
        "rows": rows,
        "errors": errors,
        "checkpoint_step": checkpoint.step,
        "resolution": list(resolution),
    }, indent=2))
    report = {
        "n_test_frames": len(records),
        "n_rows": len(rows),
        "cuts": cuts,
        "errors": errors,
        "index": str(index_path),
    }
    return report


def load_index(path: str | Path) -> dict:
    path = Path(path)
    index = json.loads(path.read_text())
    base = path.resolve().parent
    for row in index["rows"]:
        for key in ("gt", "input", "output", "filled_mask"):
            p = Path(row[key])
            row[key] = str(p if p.is_absolute() else base / p)
    return index
