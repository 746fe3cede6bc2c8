"""Sector (cone) mask geometry: construction, shrinking, apex detection, IO.

Masks are plain numpy uint8 arrays of shape (H, W) with values in {0, 1}.
Angles are degrees in every public signature; radians are internal only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

APEX_TOP = "apex-top"
APEX_BOTTOM = "apex-bottom"
ORIENTATIONS = (APEX_TOP, APEX_BOTTOM)

# Intensity floor separating tissue from background after [0,1] scaling;
# one 8-bit code value, so quantization noise stays below it.
DEFAULT_BACKGROUND_THRESHOLD = 1.0 / 255.0


class DetectionError(RuntimeError):
    """Apex/boundary detection failed on the given frame."""


@dataclass(frozen=True)
class ConeSpec:
    """Parameterization of a sector field of view on an H x W canvas.

    apex_col/apex_row locate the probe tip in pixel coordinates, spread_deg
    is the full angular opening, orientation says which canvas edge the apex
    sits on.
    """

    apex_col: int
    apex_row: int
    spread_deg: float
    orientation: str
    height: int
    width: int

    def __post_init__(self):
        if not (0.0 < self.spread_deg < 180.0):
            raise ValueError(
                f"spread_deg must lie strictly inside (0, 180), got {self.spread_deg}"
            )
        if self.height < 1 or self.width < 1:
            raise ValueError(f"height/width must be >= 1, got {self.height}x{self.width}")
        if not (0 <= self.apex_col < self.width):
            raise ValueError(
                f"apex_col must satisfy 0 <= apex_col < width, got {self.apex_col} for width {self.width}"
            )
        if not (0 <= self.apex_row < self.height):
            raise ValueError(
                f"apex_row must satisfy 0 <= apex_row < height, got {self.apex_row} for height {self.height}"
            )
        if self.orientation not in ORIENTATIONS:
            raise ValueError(
                f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}"
            )

    def with_spread(self, spread_deg: float) -> "ConeSpec":
        """Same cone with a different angular opening."""
        return replace(self, spread_deg=spread_deg)

    def to_dict(self) -> dict:
        return {
            "apex_col": self.apex_col,
            "apex_row": self.apex_row,
            "spread_deg": self.spread_deg,
            "orientation": self.orientation,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeSpec":
        return cls(
            apex_col=int(d["apex_col"]),
            apex_row=int(d["apex_row"]),
            spread_deg=float(d["spread_deg"]),
            orientation=str(d["orientation"]),
            height=int(d["height"]),
            width=int(d["width"]),
        )


def validate_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Check that an array is a 2-D {0,1} mask; returns it as uint8."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


def make_cone_mask(spec: ConeSpec) -> np.ndarray:
    """Render the binary sector mask for a ConeSpec.

    A pixel (i, j) is inside iff arctan(|j - apex_col| / axial(i)) <= spread/2,
    with axial(i) = i - apex_row for apex-top and H - i for apex-bottom.
    The comparison is non-strict in double precision, so boundary ties land
    inside. Rows at or behind the apex (axial <= 0) are outside, except the
    apex pixel itself.
    """
    h, w = spec.height, spec.width
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    if spec.orientation == APEX_TOP:
        axial = rows - float(spec.apex_row)
    else:
        axial = float(h) - rows
    lateral = np.abs(cols - float(spec.apex_col))

    half_angle = math.radians(spec.spread_deg) / 2.0
    mask = np.zeros((h, w), dtype=np.uint8)
    valid = axial > 0
    if valid.any():
        angles = np.arctan2(lateral[None, :], axial[valid, None])
        mask[valid] = (angles <= half_angle).astype(np.uint8)
    if spec.orientation == APEX_TOP:
        mask[spec.apex_row, spec.apex_col] = 1
    return mask


def shrink_cone(spec: ConeSpec, side_cut_deg: float) -> ConeSpec:
    """Remove side_cut_deg symmetrically from each side of the opening."""
    if side_cut_deg < 0:
        raise ValueError(f"side_cut_deg must be >= 0, got {side_cut_deg}")
    if 2.0 * side_cut_deg >= spec.spread_deg:
        raise ValueError(
            f"cut of {side_cut_deg} deg per side is too large for a "
            f"{spec.spread_deg} deg cone (2*cut must stay below the spread)"
        )
    return spec.with_spread(spec.spread_deg - 2.0 * side_cut_deg)


def cut_region_mask(full: np.ndarray, shrunk: np.ndarray) -> np.ndarray:
    """Pixels of `full` not covered by `shrunk`: the excised side segments."""
    full = validate_mask(full, "full")
    shrunk = validate_mask(shrunk, "shrunk")
    if full.shape != shrunk.shape:
        raise ValueError(f"mask shapes differ: {full.shape} vs {shrunk.shape}")
    if np.any(shrunk > full):
        raise ValueError("shrunk mask is not contained in the full mask")
    return (full & ~shrunk).astype(np.uint8)


def _fit_boundary_slope(apex_row: int, apex_col: int, rows: np.ndarray, cols: np.ndarray) -> float:
    # Least-squares slope of (col - apex_col) against axial distance for a ray
    # through the apex (no intercept).
    d = rows.astype(np.float64) - float(apex_row)
    x = cols.astype(np.float64) - float(apex_col)
    denom = float(np.dot(d, d))
    if denom == 0.0:
        raise DetectionError("boundary fit degenerate: no axial extent")
    return float(np.dot(d, x) / denom)


def detect_apex(
    frame: np.ndarray,
    background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD,
) -> ConeSpec:
    """Recover an apex-top ConeSpec from a scan-converted grayscale frame.

    The apex is the midpoint of the first above-threshold run scanning rows
    top-down. The opening angle comes from least-squares ray fits to the
    leftmost/rightmost above-threshold pixel per row, using rows in the lower
    half of the usable extent (rows whose run touches the frame border are
    skipped: there the boundary is clipped, not the cone's edge).
    """
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"frame must be 2-D grayscale, got shape {arr.shape}")
    h, w = arr.shape
    above = arr > background_threshold
    row_any = above.any(axis=1)
    if not row_any.any():
        raise DetectionError("frame has no pixels above the background threshold")

    apex_row = int(np.argmax(row_any))
    run = np.flatnonzero(above[apex_row])
    apex_col = int(round((run[0] + run[-1]) / 2.0))

    rows_below = np.flatnonzero(row_any)
    rows_below = rows_below[rows_below > apex_row]
    if rows_below.size == 0:
        raise DetectionError("no cone body below the apex row")

    left = np.argmax(above[rows_below], axis=1)
    right = w - 1 - np.argmax(above[rows_below][:, ::-1], axis=1)
    unclipped = (left > 0) & (right < w - 1)
    if unclipped.sum() < 2:
        raise DetectionError("boundary fit degenerate: fewer than 2 unclipped rows")
    rows_u, left_u, right_u = rows_below[unclipped], left[unclipped], right[unclipped]

    # Lower half of the usable span: larger axial distance, smaller relative
    # quantization error in the boundary columns.
    lower_cut = (apex_row + rows_u.max()) / 2.0
    take = rows_u >= lower_cut
    if take.sum() < 2:
        take = np.ones_like(rows_u, dtype=bool)
    s_left = _fit_boundary_slope(apex_row, apex_col, rows_u[take], left_u[take])
    s_right = _fit_boundary_slope(apex_row, apex_col, rows_u[take], right_u[take])
    if s_right <= s_left:
        raise DetectionError("boundary fit degenerate: left/right rays collinear or crossed")

    spread_deg = math.degrees(math.atan(s_right) - math.atan(s_left))
    if not (0.0 < spread_deg < 180.0):
        raise DetectionError(f"detected spread {spread_deg:.2f} deg outside (0, 180)")
    return ConeSpec(
        apex_col=apex_col,
        apex_row=apex_row,
        spread_deg=spread_deg,
        orientation=APEX_TOP,
        height=h,
        width=w,
    )


def save_mask(path: str | Path, mask: np.ndarray, spec: ConeSpec) -> None:
    """Write a mask as an 8-bit {0,255} PNG plus a ConeSpec JSON sidecar."""
    path = Path(path)
    mask = validate_mask(mask)
    Image.fromarray(mask * np.uint8(255), mode="L").save(path, format="PNG")
    path.with_suffix(".json").write_text(json.dumps(spec.to_dict(), indent=2))


def load_mask(path: str | Path) -> tuple[np.ndarray, ConeSpec]:
    """Read back a mask PNG and its ConeSpec sidecar (bit-exact round trip)."""
    path = Path(path)
    img = np.asarray(Image.open(path).convert("L"))
    if not np.isin(img, (0, 255)).all():
        raise ValueError(f"{path} is not a binary {{0,255}} mask image")
    spec = ConeSpec.from_dict(json.loads(path.with_suffix(".json").read_text()))
    return (img // 255).astype(np.uint8), spec
