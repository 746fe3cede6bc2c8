"""Image-quality metric suite over outpainting results, grouped per cut angle.

Conventions (fixed and documented rather than guessed): MSE/L1/PSNR are
computed over the filled region only; the perceptual distance and SSIM see
the full composited frame, SSIM averaged over the fan footprint; FID compares
the feature distribution of composited outputs per cut against the ground
truth population of the whole test split. PSNR uses peak 1.0 and is capped
at 100 dB. SSIM here is the standard higher-is-better index, 11x11 Gaussian
window with sigma 1.5.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy.signal import convolve2d

from fanfill.geometry import ConeSpec, make_cone_mask, validate_mask
from fanfill.losses import lpips

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def pixel_metrics(gt: np.ndarray, out: np.ndarray, region: np.ndarray) -> tuple[float, float, float]:
    """(MSE, L1, PSNR) over the region pixels only, peak value 1.0."""
    gt = np.asarray(gt, dtype=np.float64)
    out = np.asarray(out, dtype=np.float64)
    region = validate_mask(region, "region").astype(bool)
    if gt.shape != out.shape or gt.shape != region.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape}, out {out.shape}, region {region.shape}")
    if not region.any():
        raise ValueError("empty region")
    diff = gt[region] - out[region]
    mse = float(np.mean(diff ** 2))
    l1 = float(np.mean(np.abs(diff)))
    psnr = PSNR_CAP_DB if mse == 0.0 else min(-10.0 * np.log10(mse), PSNR_CAP_DB)
    return mse, l1, float(psnr)


def fid_from_stats(mu_r: np.ndarray, cov_r: np.ndarray,
                   mu_g: np.ndarray, cov_g: np.ndarray) -> float:
    """||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2)).

    The product square root's trace is computed from the eigenvalues of the
    symmetrized product C_r^(1/2) C_g C_r^(1/2); small negative eigenvalues
    from round-off are clipped at zero (warned when the clipped mass is
    non-negligible).
    """
    mu_r, mu_g = np.asarray(mu_r, dtype=np.float64), np.asarray(mu_g, dtype=np.float64)
    cov_r, cov_g = np.asarray(cov_r, dtype=np.float64), np.asarray(cov_g, dtype=np.float64)

    vals_r, vecs_r = np.linalg.eigh((cov_r + cov_r.T) / 2.0)
    clipped = -vals_r[vals_r < 0].sum()
    if clipped > 1e-6:
        logger.warning("clipped %.3g of negative eigenvalue mass in real covariance", clipped)
    sqrt_r = (vecs_r * np.sqrt(np.clip(vals_r, 0.0, None))) @ vecs_r.T

    inner = sqrt_r @ ((cov_g + cov_g.T) / 2.0) @ sqrt_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    clipped = -vals[vals < 0].sum()
    if clipped > 1e-6:
        logger.warning("clipped %.3g of negative eigenvalue mass in the product term", clipped)
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())

    value = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    """Frechet distance between Gaussian fits to two feature populations."""
    real = np.asarray(real_features, dtype=np.float64)
    gen = np.asarray(gen_features, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2:
        raise ValueError("feature arrays must be 2-D (n_samples x dim)")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"feature dims differ: {real.shape[1]} vs {gen.shape[1]}")
    if not (np.isfinite(real).all() and np.isfinite(gen).all()):
        raise ValueError("features must be finite")
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise ValueError("need at least 2 samples per population")
    d = real.shape[1]
    if real.shape[0] <= d or gen.shape[0] <= d:
        logger.warning(
            "feature count (%d real / %d gen) does not exceed dim %d; "
            "covariances are singular and the estimate is noisy",
            real.shape[0], gen.shape[0], d,
        )
    return fid_from_stats(
        real.mean(axis=0), np.cov(real, rowvar=False),
        gen.mean(axis=0), np.cov(gen, rowvar=False),
    )


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(gt: np.ndarray, out: np.ndarray, region: np.ndarray | None = None) -> float:
    """Mean structural similarity over windows fully inside the frame.

    The per-window map exists on the interior (valid-convolution) grid; when
    a region mask is given the mean is restricted to interior pixels of that
    region (the fan footprint in the evaluation pipeline).
    """
    gt = np.asarray(gt, dtype=np.float64)
    out = np.asarray(out, dtype=np.float64)
    if gt.shape != out.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {out.shape}")
    if gt.ndim != 2:
        raise ValueError("ssim expects 2-D grayscale images")
    if min(gt.shape) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    for name, img in (("gt", gt), ("out", out)):
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"{name} values must lie in [0, 1]")

    w = _gaussian_window()
    mu_x = convolve2d(gt, w, mode="valid")
    mu_y = convolve2d(out, w, mode="valid")
    xx = convolve2d(gt * gt, w, mode="valid") - mu_x ** 2
    yy = convolve2d(out * out, w, mode="valid") - mu_y ** 2
    xy = convolve2d(gt * out, w, mode="valid") - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    )
    if region is None:
        return float(ssim_map.mean())
    region = validate_mask(region, "region").astype(bool)
    if region.shape != gt.shape:
        raise ValueError(f"region shape {region.shape} does not match images {gt.shape}")
    pad = (SSIM_WINDOW - 1) // 2
    interior = region[pad:-pad, pad:-pad]
    if not interior.any():
        raise ValueError("region has no interior pixels for the SSIM window")
    return float(ssim_map[interior].mean())


class StubFidFeatures(nn.Module):
    """Seeded random conv features for offline FID; 64-dim pooled output.

    Absolute values are meaningless next to Inception-based numbers; only
    comparisons within one stub seed are.
    """

    source = "test-stub"

    def __init__(self, seed: int = 0, dim: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (16, 32, dim)
        layers = []
        cin = 1
        for width in widths:
            conv = nn.Conv2d(cin, width, 3, 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.3)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers += [conv, nn.LeakyReLU(0.2)]
            cin = width
        self.body = nn.Sequential(*layers)
        self.dim = dim
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))


class InceptionFidFeatures(nn.Module):
    """Canonical Inception pool features from a local weights file.

    Needs torchvision; absolute values are only comparable across runs that
    use the same canonical weights.
    """

    source = "inception-v3"

    def __init__(self, weights_path: str | Path):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        net.fc = nn.Identity()
        net.eval()
        self.net = net
        self.dim = 2048
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x.repeat(1, 3, 1, 1))


def load_fid_features(weights_path: str | Path | None = None, seed: int = 0) -> nn.Module:
    if weights_path is None:
        logger.warning(
            "no FID feature weights configured; using the seeded stub (seed=%d). "
            "Scores are not comparable to canonical Inception-based values.", seed,
        )
        return StubFidFeatures(seed=seed)
    return InceptionFidFeatures(weights_path)


def extract_features(images: list[np.ndarray], model: nn.Module, batch_size: int = 32) -> np.ndarray:
    """Stack pooled features for a list of H x W images in [0, 1]."""
    if not images:
        raise ValueError("no images to extract features from")
    model.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(
                np.stack(images[i:i + batch_size]).astype(np.float32)
            ).unsqueeze(1)
            chunks.append(model(x).numpy())
    return np.concatenate(chunks, axis=0)


@dataclass
class CutMetrics:
    cut_deg: float
    mse: float
    l1: float
    fid: float
    lpips: float
    psnr: float
    ssim: float
    n_images: int


@dataclass
class MetricReport:
    rows: list[CutMetrics]
    metadata: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        payload = {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricReport":
        payload = json.loads(Path(path).read_text())
        return cls(rows=[CutMetrics(**r) for r in payload["rows"]], metadata=payload["metadata"])

    def to_text(self) -> str:
        cuts = [r.cut_deg for r in self.rows]
        header = "Metric  " + "".join(f"  Cut {2 * c:g}      " for c in cuts)
        lines = [header, "-" * len(header)]
        for name, better in (("MSE", "v"), ("L1", "v"), ("FID", "v"),
                             ("LPIPS", "v"), ("PSNR", "^"), ("SSIM", "^")):
            vals = [getattr(r, name.lower()) for r in self.rows]
            lines.append(f"{name:<6}{better} " + "".join(f"  {v:<12.5g}" for v in vals))
        lines.append("n_images  " + "".join(f"{r.n_images:<14d}" for r in self.rows))
        return "\n".join(lines)


def _load_gray01(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def evaluate(index: dict, extractor: nn.Module, feature_model: nn.Module,
             metadata: dict | None = None) -> MetricReport:
    """Compute the per-cut metric table from a batch_outpaint index.

    Rows are processed in sorted order so results do not depend on index file
    ordering; missing image files are reported in the metadata and excluded,
    with n_images reflecting what was actually scored.
    """
    rows = sorted(index["rows"], key=lambda r: (r["cut_deg"], r["frame_id"]))
    if not rows:
        raise ValueError("index has no rows")

    missing: list[str] = []
    per_cut: dict[float, dict] = {}
    gt_by_frame: dict[str, np.ndarray] = {}
    for row in rows:
        cut = float(row["cut_deg"])
        bucket = per_cut.setdefault(cut, {"mse": [], "l1": [], "psnr": [], "ssim": [],
                                          "lpips": [], "outputs": []})
        try:
            gt = _load_gray01(row["gt"])
            out = _load_gray01(row["output"])
            filled = (np.asarray(Image.open(row["filled_mask"]).convert("L")) > 127).astype(np.uint8)
        except (OSError, ValueError) as exc:
            missing.append(f"{row['frame_id']} (cut {cut:g}): {exc}")
            continue
        cone_mask = make_cone_mask(ConeSpec.from_dict(row["cone"])) if "cone" in row else None

        if filled.any():
            mse, l1, psnr = pixel_metrics(gt, out, filled)
        else:  # zero-cut rows: nothing was filled, the output must equal gt
            mse, l1, psnr = pixel_metrics(gt, out, np.ones_like(filled))
        bucket["mse"].append(mse)
        bucket["l1"].append(l1)
        bucket["psnr"].append(psnr)
        bucket["ssim"].append(ssim(gt, out, region=cone_mask))
        bucket["lpips"].append(float(lpips(gt.astype(np.float32), out.astype(np.float32), extractor)))
        bucket["outputs"].append(out)
        gt_by_frame.setdefault(row["frame_id"], gt)

    if missing:
        logger.warning("evaluate: %d rows skipped for missing/broken files", len(missing))

    real_images = [gt_by_frame[k] for k in sorted(gt_by_frame)]
    if len(real_images) < 2:
        raise ValueError("need at least 2 readable ground-truth frames for FID")
    real_features = extract_features(real_images, feature_model)

    report_rows = []
    for cut in sorted(per_cut):
        bucket = per_cut[cut]
        if not bucket["outputs"]:
            continue
        gen_features = extract_features(bucket["outputs"], feature_model)
        report_rows.append(CutMetrics(
            cut_deg=cut,
            mse=float(np.mean(bucket["mse"])),
            l1=float(np.mean(bucket["l1"])),
            fid=fid(real_features, gen_features),
            lpips=float(np.mean(bucket["lpips"])),
            psnr=float(np.mean(bucket["psnr"])),
            ssim=float(np.mean(bucket["ssim"])),
            n_images=len(bucket["outputs"]),
        ))
    meta = dict(metadata or {})
    meta.update({
        "extractor": getattr(extractor, "source", "unknown"),
        "fid_features": getattr(feature_model, "source", "unknown"),
        "missing": missing,
        "n_real_frames": len(real_images),
    })
    return MetricReport(rows=report_rows, metadata=meta)


def contact_sheet(index: dict, out_path: str | Path, max_frames: int = 6) -> list[Path]:
    """Write one GT | input | outpainted grid PNG per cut angle."""
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    rows = sorted(index["rows"], key=lambda r: (r["cut_deg"], r["frame_id"]))
    cuts = sorted({float(r["cut_deg"]) for r in rows})
    written = []
    for cut in cuts:
        cut_rows = [r for r in rows if float(r["cut_deg"]) == cut][:max_frames]
        panels = []
        for row in cut_rows:
            triplet = [_load_gray01(row[k]) for k in ("gt", "input", "output")]
            sep = np.ones((triplet[0].shape[0], 2))
            panels.append(np.hstack([triplet[0], sep, triplet[1], sep, triplet[2]]))
        if not panels:
            continue
        hsep = np.ones((2, panels[0].shape[1]))
        sheet = panels[0]
        for panel in panels[1:]:
            sheet = np.vstack([sheet, hsep, panel])
        path = out_path / f"contact_cut{cut:g}.png"
        Image.fromarray(np.round(sheet * 255.0).astype(np.uint8), mode="L").save(path)
        written.append(path)
    return written
