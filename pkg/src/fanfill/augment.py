"""Training-input construction: shrink the fan, mask the frame, keep both masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fanfill.data import Frame
from fanfill.geometry import make_cone_mask, shrink_cone

# Side-cut angles drawn during training, degrees removed per side.
CUT_CHOICES_DEG = (15.0, 23.0, 30.0, 40.0)


@dataclass(frozen=True)
class AugmentedSample:
    """One generator training input.

    target is the frame restricted to the full cone (zero outside), the
    masked image is target restricted further to the shrunk cone; the two
    masks delimit what the generator must reproduce vs invent.
    """

    masked_image: np.ndarray
    augment_mask: np.ndarray
    full_mask: np.ndarray
    target: np.ndarray
    cut_deg_per_side: float


def augment(frame: Frame, cut_deg_per_side: float) -> AugmentedSample:
    """Build the shrunk-fan sample for one frame.

    The reconstruction identity target * augment_mask == masked_image holds
    exactly (masks are 0/1, multiplication is the defining operation).
    """
    full_mask = make_cone_mask(frame.cone)
    augment_mask = make_cone_mask(shrink_cone(frame.cone, cut_deg_per_side))
    target = frame.pixels * full_mask
    masked_image = target * augment_mask
    return AugmentedSample(
        masked_image=masked_image,
        augment_mask=augment_mask,
        full_mask=full_mask,
        target=target,
        cut_deg_per_side=cut_deg_per_side,
    )


def sample_cut(rng: np.random.Generator) -> float:
    """Draw one side-cut angle uniformly from CUT_CHOICES_DEG."""
    return float(rng.choice(CUT_CHOICES_DEG))


def feasible_cuts(spread_deg: float) -> tuple[float, ...]:
    """Cut choices that leave the fan a positive opening (2*cut < spread)."""
    return tuple(c for c in CUT_CHOICES_DEG if 2.0 * c < spread_deg)


def sample_feasible_cut(rng: np.random.Generator, spread_deg: float) -> float:
    """Uniform draw over the cuts a fan of this spread can absorb.

    Narrow fans cannot take the largest cuts (a 40 deg side cut needs more
    than an 80 deg fan), so training draws per sample from the feasible
    subset instead of crashing on narrow-fan frames.
    """
    choices = feasible_cuts(spread_deg)
    if not choices:
        raise ValueError(
            f"no feasible cut for a {spread_deg} deg fan "
            f"(smallest choice is {min(CUT_CHOICES_DEG)} deg per side)"
        )
    return float(rng.choice(choices))


def save_sample_grid(samples: list[AugmentedSample], path: str | Path) -> None:
    """Debug dump: one row per sample, columns masked | mask | target."""
    if not samples:
        raise ValueError("no samples to dump")
    rows = []
    for s in samples:
        sep = np.ones((s.target.shape[0], 2), dtype=np.float64)
        rows.append(np.hstack([s.masked_image, sep, s.augment_mask.astype(np.float64), sep, s.target]))
    hsep = np.ones((2, rows[0].shape[1]))
    grid = rows[0]
    for row in rows[1:]:
        grid = np.vstack([grid, hsep, row])
    Image.fromarray(np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8), mode="L").save(Path(path))
