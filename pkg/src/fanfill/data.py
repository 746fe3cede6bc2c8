"""Frame ingestion: manifests with patient-level splits, loading, synthetic data.

Expected on-disk layout is ``root/<patient_id>/<frame_id>.png`` with grayscale
frames. The manifest is a CSV with header
``patient_id,frame_id,path,split,apex_row,apex_col,spread_deg,orientation``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from fanfill.geometry import (
    APEX_TOP,
    ConeSpec,
    DetectionError,
    detect_apex,
    make_cone_mask,
)

logger = logging.getLogger(__name__)

MANIFEST_HEADER = [
    "patient_id",
    "frame_id",
    "path",
    "split",
    "apex_row",
    "apex_col",
    "spread_deg",
    "orientation",
]

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class FrameRecord:
    patient_id: str
    frame_id: str
    path: Path
    split: str
    cone: ConeSpec


@dataclass(frozen=True)
class Frame:
    """A loaded frame: intensities in [0, 1], cone spec at this resolution."""

    pixels: np.ndarray
    record: FrameRecord

    @property
    def cone(self) -> ConeSpec:
        return self.record.cone


@dataclass
class Manifest:
    records: list[FrameRecord]
    skipped: int = 0

    def split(self, name: str) -> list[FrameRecord]:
        return [r for r in self.records if r.split == name]

    def patients(self, split: str | None = None) -> set[str]:
        return {r.patient_id for r in self.records if split is None or r.split == split}

    def write_csv(self, path: str | Path) -> None:
        # Frame paths are stored relative to the manifest file so a dataset
        # directory can be moved or compared across runs byte-for-byte.
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.resolve().parent
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                try:
                    frame_path = Path(os.path.relpath(r.path.resolve(), base)).as_posix()
                except ValueError:
                    frame_path = r.path.resolve().as_posix()
                writer.writerow([
                    r.patient_id,
                    r.frame_id,
                    frame_path,
                    r.split,
                    r.cone.apex_row,
                    r.cone.apex_col,
                    repr(float(r.cone.spread_deg)),
                    r.cone.orientation,
                ])

    @classmethod
    def read_csv(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ValueError(
                    f"manifest {path} has header {reader.fieldnames}, expected {MANIFEST_HEADER}"
                )
            for row in reader:
                frame_path = Path(row["path"])
                if not frame_path.is_absolute():
                    frame_path = (path.resolve().parent / frame_path).resolve()
                # Frame dimensions are not manifest columns; read them from the
                # image header (no pixel decode).
                with Image.open(frame_path) as img:
                    w, h = img.size
                cone = ConeSpec(
                    apex_col=int(row["apex_col"]),
                    apex_row=int(row["apex_row"]),
                    spread_deg=float(row["spread_deg"]),
                    orientation=row["orientation"],
                    height=h,
                    width=w,
                )
                records.append(
                    FrameRecord(
                        patient_id=row["patient_id"],
                        frame_id=row["frame_id"],
                        path=frame_path,
                        split=row["split"],
                        cone=cone,
                    )
                )
        return cls(records=records)


def scale_cone(spec: ConeSpec, new_height: int, new_width: int) -> ConeSpec:
    """Map a ConeSpec onto a resized pixel grid.

    Apex coordinates scale linearly. The opening angle only changes under
    anisotropic resizing, where tan(spread/2) scales by the ratio of the
    lateral to the axial zoom.
    """
    if (new_height, new_width) == (spec.height, spec.width):
        return spec
    sy = new_height / spec.height
    sx = new_width / spec.width
    apex_row = min(int(round(spec.apex_row * sy)), new_height - 1)
    apex_col = min(int(round(spec.apex_col * sx)), new_width - 1)
    spread = spec.spread_deg
    if not math.isclose(sx, sy):
        half = math.atan(math.tan(math.radians(spread) / 2.0) * (sx / sy))
        spread = math.degrees(2.0 * half)
    return replace(
        spec,
        apex_row=apex_row,
        apex_col=apex_col,
        spread_deg=spread,
        height=new_height,
        width=new_width,
    )


def _decode_gray(path: Path) -> tuple[np.ndarray, float]:
    """Read an image as a float grayscale array plus its max code value."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L"):
                arr = np.asarray(img, dtype=np.float64)
                max_code = 65535.0
            else:
                arr = np.asarray(img.convert("L"), dtype=np.float64)
                max_code = 255.0
    except Exception as exc:
        raise ValueError(f"could not decode {path}: {exc}") from exc
    return arr, max_code


def load_frame(record: FrameRecord, target_size: tuple[int, int]) -> Frame:
    """Load, bicubic-resize, and scale a frame into [0, 1].

    target_size is (H, W); both must be divisible by 8 so that the generator's
    three stride-2 stages divide cleanly.
    """
    th, tw = target_size
    if th % 8 != 0 or tw % 8 != 0:
        raise ValueError(f"target_size {target_size} must be divisible by 8")
    arr, max_code = _decode_gray(record.path)
    h, w = arr.shape
    if (h, w) != (th, tw):
        img = Image.fromarray(arr.astype(np.float32), mode="F")
        arr = np.asarray(img.resize((tw, th), Image.BICUBIC), dtype=np.float64)
    pixels = np.clip(arr / max_code, 0.0, 1.0).astype(np.float32)
    cone = scale_cone(record.cone, th, tw)
    return Frame(pixels=pixels, record=replace(record, cone=cone))


def _assign_splits(patients: list[str], split_fraction: float, seed: int) -> dict[str, str]:
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(patients)))
    n_train = int(round(split_fraction * len(patients)))
    train_ids = {patients[i] for i in order[:n_train]}
    if n_train == len(patients):
        logger.warning("test split is empty (%d patients, fraction %.2f)", len(patients), split_fraction)
    if n_train == 0:
        logger.warning("train split is empty (%d patients, fraction %.2f)", len(patients), split_fraction)
    return {p: (TRAIN if p in train_ids else TEST) for p in patients}


def build_manifest(root: str | Path, split_fraction: float = 0.8, seed: int = 0) -> Manifest:
    """Scan ``root/<patient>/<frame>.png``, detect cones, split by patient.

    Every patient lands wholly in one split (seeded, deterministic). Frames
    that fail to decode or whose cone cannot be detected are skipped with a
    warning and counted in ``Manifest.skipped``.
    """
    root = Path(root)
    if not (0.0 <= split_fraction <= 1.0):
        raise ValueError(f"split_fraction must be in [0, 1], got {split_fraction}")
    patients = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not patients:
        raise ValueError(f"no per-patient subdirectories found under {root}")
    split_of = _assign_splits(patients, split_fraction, seed)

    records: list[FrameRecord] = []
    skipped = 0
    for patient in patients:
        for frame_path in sorted((root / patient).glob("*.png")):
            try:
                arr, max_code = _decode_gray(frame_path)
                cone = detect_apex(arr / max_code)
            except (ValueError, DetectionError) as exc:
                logger.warning("skipping %s: %s", frame_path, exc)
                skipped += 1
                continue
            records.append(
                FrameRecord(
                    patient_id=patient,
                    frame_id=frame_path.stem,
                    path=frame_path.resolve(),
                    split=split_of[patient],
                    cone=cone,
                )
            )
    return Manifest(records=records, skipped=skipped)


def _ellipse_factor(h: int, w: int, center, axes, angle: float, darkness: float) -> np.ndarray:
    # Multiplicative darkening inside a rotated ellipse, 1.0 outside.
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / axes[1]
    v = (-dx * sa + dy * ca) / axes[0]
    inside = (u * u + v * v) <= 1.0
    factor = np.ones((h, w))
    factor[inside] = darkness
    return factor


def make_synthetic_dataset(
    n_patients: int,
    frames_per_patient: int,
    seed: int,
    out: str | Path,
    image_size: tuple[int, int] = (128, 128),
    split_fraction: float = 0.8,
) -> Manifest:
    """Write a deterministic echo-like dataset and return its manifest.

    Each patient gets a fixed cone (spread in [70, 100] degrees, apex near
    top-center) and a fixed set of 2..4 dark elliptical chambers; frames of
    one patient share those parameters up to small per-frame jitter. Frames
    are speckle-textured inside the cone, zero outside, saved as 8-bit PNG.
    A ``dataset.json`` provenance file and a ``manifest.csv`` are written
    alongside the patient directories.
    """
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    out = Path(out)
    h, w = image_size
    records: list[FrameRecord] = []
    split_of = _assign_splits([f"p{i:03d}" for i in range(n_patients)], split_fraction, seed)

    for p in range(n_patients):
        patient = f"p{p:03d}"
        rng_p = np.random.default_rng([seed, p])
        spread = float(rng_p.uniform(70.0, 100.0))
        apex_col = int(w // 2 + rng_p.integers(-4, 5))
        apex_row = int(rng_p.integers(0, 3))
        spec = ConeSpec(apex_col, apex_row, spread, APEX_TOP, h, w)
        cone = make_cone_mask(spec).astype(np.float64)

        n_chambers = int(rng_p.integers(2, 5))
        chambers = []
        for _ in range(n_chambers):
            depth = rng_p.uniform(0.35, 0.8) * h
            half_width = (depth - apex_row) * math.tan(math.radians(spread) / 2.0)
            col = apex_col + rng_p.uniform(-0.6, 0.6) * half_width
            chambers.append({
                "center": (depth, float(np.clip(col, 0, w - 1))),
                "axes": (rng_p.uniform(0.06, 0.16) * h, rng_p.uniform(0.05, 0.12) * w),
                "angle": float(rng_p.uniform(0.0, math.pi)),
                "darkness": float(rng_p.uniform(0.10, 0.45)),
            })

        patient_dir = out / patient
        patient_dir.mkdir(parents=True, exist_ok=True)
        for f in range(frames_per_patient):
            rng_f = np.random.default_rng([seed, p, f])
            speckle = gaussian_filter(rng_f.standard_normal((h, w)), sigma=1.2)
            speckle = speckle / max(speckle.std(), 1e-9)
            base = np.clip(0.55 + 0.2 * speckle, 0.25, 1.0)
            for ch in chambers:
                center = (
                    ch["center"][0] + rng_f.normal(0.0, 1.5),
                    ch["center"][1] + rng_f.normal(0.0, 1.5),
                )
                darkness = float(np.clip(ch["darkness"] + rng_f.normal(0.0, 0.02), 0.08, 0.6))
                base *= _ellipse_factor(h, w, center, ch["axes"], ch["angle"], darkness)
            frame = base * cone
            frame_id = f"f{f:03d}"
            path = patient_dir / f"{frame_id}.png"
            Image.fromarray(np.round(frame * 255.0).astype(np.uint8), mode="L").save(path)
            records.append(
                FrameRecord(
                    patient_id=patient,
                    frame_id=frame_id,
                    path=path.resolve(),
                    split=split_of[patient],
                    cone=spec,
                )
            )

    manifest = Manifest(records=records)
    provenance = {
        "generator": "fanfill.data.make_synthetic_dataset",
        "n_patients": n_patients,
        "frames_per_patient": frames_per_patient,
        "seed": seed,
        "image_size": [h, w],
        "split_fraction": split_fraction,
    }
    (out / "dataset.json").write_text(json.dumps(provenance, indent=2))
    manifest.write_csv(out / "manifest.csv")
    return manifest


def load_split(manifest: Manifest, split: str, target_size: tuple[int, int]) -> list[Frame]:
    """Load every frame of one split at the given resolution."""
    return [load_frame(r, target_size) for r in manifest.split(split)]
