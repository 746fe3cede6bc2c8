"""Generator (mask-conditioned U-Net) and discriminator, plus checkpoint IO.

Downsampling side of the generator: four conv stages, kernels [7, 5, 5, 5],
strides [1, 2, 2, 2], widths doubling from base_width. The decoder mirrors
the three stride-2 stages with nearest-neighbor upsampling, a 3x3 conv, and
skip concatenation; the bounded sigmoid output keeps values in [0, 1].
The discriminator is a plain CNN, channels [1, 32, 64, 128, 128], stride
list [1, 2, 2, 2], kernel 3, global-average head producing one probability.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT_VERSION = 1

# Spatial shrink factor of both networks: product of the stride lists.
STRIDE_PRODUCT = 8


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    down_kernels: tuple[int, ...] = (7, 5, 5, 5)
    down_strides: tuple[int, ...] = (1, 2, 2, 2)
    base_width: int = 32
    norm: str = "instance"
    activation: str = "leaky_relu"

    def __post_init__(self):
        if len(self.down_kernels) != 4 or len(self.down_strides) != 4:
            raise ValueError(
                "down_kernels and down_strides must both have length 4, got "
                f"{self.down_kernels} / {self.down_strides}"
            )
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.activation not in ("leaky_relu", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple[int, ...] = (1, 32, 64, 128, 128)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    kernel: int = 3
    head: str = "global-average"

    def __post_init__(self):
        if len(self.channels) != len(self.strides) + 1:
            raise ValueError(
                f"need one stride per conv: channels {self.channels}, strides {self.strides}"
            )
        if self.head != "global-average":
            raise ValueError(f"unsupported head {self.head!r}")


def _act(name: str) -> nn.Module:
    return nn.LeakyReLU(0.2) if name == "leaky_relu" else nn.ReLU()


def _conv_block(cin: int, cout: int, kernel: int, stride: int, cfg_norm: str, cfg_act: str) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, kernel, stride, (kernel - 1) // 2)]
    if cfg_norm == "instance":
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(_act(cfg_act))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        widths = [cfg.base_width * (2 ** i) for i in range(4)]

        downs = []
        cin = cfg.in_channels
        for width, k, s in zip(widths, cfg.down_kernels, cfg.down_strides):
            downs.append(_conv_block(cin, width, k, s, cfg.norm, cfg.activation))
            cin = width
        self.downs = nn.ModuleList(downs)

        # One up stage per stride-2 down stage; the stride-1 first stage has
        # nothing to mirror.
        ups = []
        for i in (2, 1, 0):
            ups.append(
                _conv_block(widths[i + 1] + widths[i], widths[i], 3, 1, cfg.norm, cfg.activation)
            )
        self.ups = nn.ModuleList(ups)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.out_conv = nn.Conv2d(widths[0], cfg.out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected B x {self.config.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % STRIDE_PRODUCT or x.shape[3] % STRIDE_PRODUCT:
            raise ValueError(f"H and W must be divisible by {STRIDE_PRODUCT}, got {tuple(x.shape[2:])}")
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = skips[-1]
        for up, skip in zip(self.ups, (skips[2], skips[1], skips[0])):
            h = up(torch.cat([self.upsample(h), skip], dim=1))
        return torch.sigmoid(self.out_conv(h))


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = config or DiscriminatorConfig()
        self.config = cfg
        layers: list[nn.Module] = []
        for i, (cin, cout, s) in enumerate(zip(cfg.channels[:-1], cfg.channels[1:], cfg.strides)):
            layers.append(nn.Conv2d(cin, cout, cfg.kernel, s, (cfg.kernel - 1) // 2))
            if i > 0:  # no normalization on the raw-intensity first layer
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cfg.channels[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-image probability of being real, shape (B,)."""
        if x.ndim != 4 or x.shape[1] != self.config.channels[0]:
            raise ValueError(f"expected B x {self.config.channels[0]} x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % STRIDE_PRODUCT or x.shape[3] % STRIDE_PRODUCT:
            raise ValueError(f"H and W must be divisible by {STRIDE_PRODUCT}, got {tuple(x.shape[2:])}")
        pooled = self.body(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(pooled)).squeeze(1)


def generator_forward(generator: Generator, masked_image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Single-frame inference: stack (masked image, mask), return H x W in [0, 1]."""
    if masked_image.shape != mask.shape:
        raise ValueError(f"shape mismatch: {masked_image.shape} vs {mask.shape}")
    x = torch.from_numpy(
        np.stack([masked_image, mask]).astype(np.float32)
    ).unsqueeze(0)
    generator.eval()
    with torch.no_grad():
        y = generator(x)
    return y[0, 0].numpy()


def discriminator_forward(discriminator: Discriminator, image: np.ndarray) -> float:
    """Single-image probability in (0, 1)."""
    x = torch.from_numpy(np.asarray(image, dtype=np.float32)).reshape(1, 1, *image.shape)
    discriminator.eval()
    with torch.no_grad():
        return float(discriminator(x)[0])


def count_parameters(obj) -> int:
    """Trainable parameter count of a config (builds the net) or module."""
    if isinstance(obj, GeneratorConfig):
        obj = Generator(obj)
    elif isinstance(obj, DiscriminatorConfig):
        obj = Discriminator(obj)
    return sum(p.numel() for p in obj.parameters() if p.requires_grad)


@dataclass
class Checkpoint:
    g_config: GeneratorConfig
    d_config: DiscriminatorConfig
    g_state: dict
    d_state: dict
    opt_g_state: dict | None
    opt_d_state: dict | None
    step: int
    resolution: tuple[int, int]
    seed: int
    format_version: int = CHECKPOINT_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def build_models(self) -> tuple[Generator, Discriminator]:
        gen = Generator(self.g_config)
        gen.load_state_dict(self.g_state)
        disc = Discriminator(self.d_config)
        disc.load_state_dict(self.d_state)
        return gen, disc


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = {
        "format_version": ckpt.format_version,
        "g_config": asdict(ckpt.g_config),
        "d_config": asdict(ckpt.d_config),
        "g_state": ckpt.g_state,
        "d_state": ckpt.d_state,
        "opt_g_state": ckpt.opt_g_state,
        "opt_d_state": ckpt.opt_d_state,
        "step": ckpt.step,
        "resolution": tuple(ckpt.resolution),
        "seed": ckpt.seed,
        "extra": ckpt.extra,
    }
    torch.save(payload, Path(path))


def _tupled(d: dict, keys: tuple[str, ...]) -> dict:
    return {k: (tuple(v) if k in keys else v) for k, v in d.items()}


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint {path} has format version {version}, "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return Checkpoint(
        g_config=GeneratorConfig(**_tupled(payload["g_config"], ("down_kernels", "down_strides"))),
        d_config=DiscriminatorConfig(**_tupled(payload["d_config"], ("channels", "strides"))),
        g_state=payload["g_state"],
        d_state=payload["d_state"],
        opt_g_state=payload["opt_g_state"],
        opt_d_state=payload["opt_d_state"],
        step=int(payload["step"]),
        resolution=tuple(payload["resolution"]),
        seed=int(payload["seed"]),
        format_version=version,
        extra=payload.get("extra", {}),
    )
