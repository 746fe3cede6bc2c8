"""Adversarial losses, the deep-feature perceptual distance, and their sum.

The discriminator loss is the empirical-mean estimator
-E[log D(real)] - E[log(1 - D(fake))]; the generator's adversarial part is
the non-saturating -E[log D(fake)]. The perceptual term averages squared
feature differences per layer, 1/(H_l W_l C_l) * sum ||f_l(a) - f_l(b)||^2,
weighted by w_l. Feature maps are unit-normalized across channels at each
spatial location by default (the metric's standard convention); pass
normalize_features=False for the literal raw-feature form. The combined
generator objective is the plain unweighted sum of both terms.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-7


def _scalar(v: torch.Tensor | float) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

# Conv layout of the canonical 16-layer VGG feature stack; "M" is max-pool.
_VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
# Taps after the last ReLU of each of the five conv blocks.
_VGG16_TAPS = (3, 8, 15, 22, 29)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossBundle:
    """Scalar loss record; g_total is always the exact sum of the g parts."""

    d_loss: torch.Tensor | float
    g_adv: torch.Tensor | float
    g_lpips: torch.Tensor | float
    g_total: torch.Tensor | float

    def __post_init__(self):
        for name in ("d_loss", "g_adv", "g_lpips", "g_total"):
            if not math.isfinite(_scalar(getattr(self, name))):
                raise ValueError(f"loss component {name} is not finite")

    def to_floats(self) -> dict[str, float]:
        return {
            "d_loss": _scalar(self.d_loss),
            "g_adv": _scalar(self.g_adv),
            "g_lpips": _scalar(self.g_lpips),
            "g_total": _scalar(self.g_total),
        }


def _scores(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float32)
    t = t.reshape(-1)
    if t.numel() == 0:
        raise ValueError("empty score batch")
    return t.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def d_loss(real_scores, fake_scores) -> torch.Tensor:
    """-mean(log real) - mean(log(1 - fake)); scores clamped away from {0,1}."""
    real = _scores(real_scores)
    fake = _scores(fake_scores)
    return -torch.log(real).mean() - torch.log(1.0 - fake).mean()


def g_adv_loss(fake_scores) -> torch.Tensor:
    """Non-saturating generator objective -mean(log fake)."""
    return -torch.log(_scores(fake_scores)).mean()


class StubFeatureExtractor(nn.Module):
    """Small frozen random conv stack standing in for pretrained weights.

    Deterministic under its seed, so tests and offline runs exercise the
    metric's formula without downloading anything.
    """

    source = "test-stub"
    expected_channels = 3

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (8, 16, 24)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = self.expected_channels
        for i, width in enumerate(widths):
            conv = nn.Conv2d(cin, width, 3, 1 if i == 0 else 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            stages.append(nn.Sequential(conv, nn.ReLU()))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.weights_per_layer = [1.0] * len(widths)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class Vgg16FeatureExtractor(nn.Module):
    """Five conv-block feature taps of a VGG16 stack loaded from a weights file.

    The file must be a torch state dict with ``features.N.weight/bias`` keys
    (the layout used by common pretrained VGG16 distributions).
    """

    source = "pretrained-vgg16"
    expected_channels = 3

    def __init__(self, weights_path: str | Path):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for entry in _VGG16_LAYOUT:
            if entry == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(cin, entry, 3, 1, 1))
                layers.append(nn.ReLU())
                cin = entry
        self.features = nn.Sequential(*layers)
        state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
        own = {k: v for k, v in state.items() if k.startswith("features.")}
        self.load_state_dict(own)
        self.weights_per_layer = [1.0] * len(_VGG16_TAPS)
        self.register_buffer("input_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = (x - self.input_mean) / self.input_std
        feats = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in _VGG16_TAPS:
                feats.append(h)
        return feats


def load_feature_extractor(weights_path: str | Path | None = None, seed: int = 0,
                           layer_weights_path: str | Path | None = None) -> nn.Module:
    """Pretrained extractor when a weights file is given, else the test stub."""
    if weights_path is None:
        logger.warning(
            "no perceptual-extractor weights configured; using the seeded "
            "test stub (seed=%d). Values are NOT comparable to pretrained-VGG16 runs.",
            seed,
        )
        extractor = StubFeatureExtractor(seed=seed)
    else:
        extractor = Vgg16FeatureExtractor(weights_path)
    if layer_weights_path is not None:
        weights = json.loads(Path(layer_weights_path).read_text())
        if len(weights) != len(extractor.weights_per_layer):
            raise ValueError(
                f"{layer_weights_path} has {len(weights)} layer weights, "
                f"extractor taps {len(extractor.weights_per_layer)} layers"
            )
        if any(w < 0 for w in weights):
            raise ValueError("layer weights must be >= 0")
        extractor.weights_per_layer = [float(w) for w in weights]
    return extractor


def _as_batched_images(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if isinstance(x, np.ndarray) else x, dtype=torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0).unsqueeze(0)
    elif t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ValueError(f"{name} must be HxW, CxHxW, or BxCxHxW, got {tuple(t.shape)}")
    return t


def lpips(img_a, img_b, extractor: nn.Module, normalize_features: bool = True) -> torch.Tensor:
    """Perceptual distance between two images (or batches) >= 0."""
    a = _as_batched_images(img_a, "img_a")
    b = _as_batched_images(img_b, "img_b")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    want = extractor.expected_channels
    if a.shape[1] == 1 and want == 3:
        a = a.repeat(1, 3, 1, 1)
        b = b.repeat(1, 3, 1, 1)
    elif a.shape[1] != want:
        raise ValueError(f"extractor expects {want} channels, got {a.shape[1]}")

    feats_a = extractor(a)
    feats_b = extractor(b)
    total = torch.zeros((), dtype=torch.float32)
    for w, fa, fb in zip(extractor.weights_per_layer, feats_a, feats_b):
        if normalize_features:
            fa = fa / fa.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-10)
            fb = fb / fb.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-10)
        total = total + w * (fa - fb).pow(2).mean(dim=(1, 2, 3)).mean()
    return total


def combined_g_loss(fake_scores, generated, target, extractor: nn.Module,
                    d_loss_value: torch.Tensor | float = 0.0,
                    normalize_features: bool = True) -> LossBundle:
    """Bundle the generator objective: adversarial part + perceptual part.

    `generated` is the composited output, `target` the full ground-truth
    frame; d_loss_value is carried through for logging (the training loop
    fills it in, it does not affect g_total).
    """
    adv = g_adv_loss(fake_scores)
    perc = lpips(generated, target, extractor, normalize_features=normalize_features)
    return LossBundle(d_loss=d_loss_value, g_adv=adv, g_lpips=perc, g_total=adv + perc)
