"""Alternating generator/discriminator optimization with checkpoint/resume.

Reproducibility contract: batch composition and per-sample cut angles are
pure functions of (seed, step), so resuming from a checkpoint replays the
exact data order without serializing RNG state. The networks consume no
random numbers after initialization (no dropout, nearest upsampling), which
makes the resumed loss trajectory bit-identical on one machine.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from fanfill.augment import AugmentedSample, augment, sample_feasible_cut
from fanfill.data import Frame, Manifest, load_split
from fanfill.losses import LossBundle, combined_g_loss, d_loss, load_feature_extractor
from fanfill.networks import (
    Checkpoint,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the offending batch was dumped for inspection."""


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 100
    resolution: tuple[int, int] = (128, 128)
    d_steps_per_g_step: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # Zero is allowed so the no-update identity case stays testable.
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be >= 0")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        h, w = self.resolution
        if h % 8 or w % 8:
            raise ValueError(f"resolution {self.resolution} must be divisible by 8")


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    extractor: torch.nn.Module
    step: int = 0
    loss_history: deque = field(default_factory=lambda: deque(maxlen=256))
    out_dir: Path | None = None


def init_state(
    config: TrainConfig,
    extractor: torch.nn.Module | None = None,
    g_config: GeneratorConfig | None = None,
    d_config: DiscriminatorConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainState:
    torch.manual_seed(config.seed)
    generator = Generator(g_config)
    discriminator = Discriminator(d_config)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.lr_g, betas=(config.adam_beta1, config.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=config.lr_d, betas=(config.adam_beta1, config.adam_beta2)
    )
    if extractor is None:
        extractor = load_feature_extractor(None, seed=config.seed)
    return TrainState(
        config=config,
        generator=generator,
        discriminator=discriminator,
        opt_g=opt_g,
        opt_d=opt_d,
        extractor=extractor,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )


def _stack(batch: list[AugmentedSample], attr: str) -> torch.Tensor:
    arrays = [getattr(s, attr).astype(np.float32) for s in batch]
    return torch.from_numpy(np.stack(arrays)).unsqueeze(1)


def _dump_bad_batch(state: TrainState, batch: list[AugmentedSample]) -> Path | None:
    if state.out_dir is None:
        return None
    path = state.out_dir / f"diverged_step{state.step:06d}.npz"
    np.savez_compressed(
        path,
        target=np.stack([s.target for s in batch]),
        masked=np.stack([s.masked_image for s in batch]),
        augment_mask=np.stack([s.augment_mask for s in batch]),
        full_mask=np.stack([s.full_mask for s in batch]),
        cuts=np.array([s.cut_deg_per_side for s in batch]),
    )
    return path


def train_step(state: TrainState, batch: list[AugmentedSample]) -> tuple[TrainState, LossBundle]:
    """One alternating update: d_steps_per_g_step D steps, then one G step.

    Real examples for D are frames masked to the full cone; fakes are
    composites with the known pixels pasted back, detached from G's graph
    during the D update.
    """
    if not batch:
        raise ValueError("empty training batch")
    target = _stack(batch, "target")
    masked = _stack(batch, "masked_image")
    aug_mask = _stack(batch, "augment_mask")
    full_mask = _stack(batch, "full_mask")
    fill_mask = full_mask - aug_mask
    x_in = torch.cat([masked, aug_mask], dim=1)

    state.generator.train()
    state.discriminator.train()

    loss_d_value = 0.0
    for _ in range(state.config.d_steps_per_g_step):
        with torch.no_grad():
            fake = masked + state.generator(x_in) * fill_mask
        state.opt_d.zero_grad()
        loss_d = d_loss(state.discriminator(target), state.discriminator(fake))
        if not np.isfinite(float(loss_d.detach())):
            dump = _dump_bad_batch(state, batch)
            raise TrainingDiverged(
                f"non-finite discriminator loss at step {state.step}; batch dumped to {dump}"
            )
        loss_d.backward()
        state.opt_d.step()
        loss_d_value = float(loss_d.detach())

    state.opt_g.zero_grad()
    composite = masked + state.generator(x_in) * fill_mask
    try:
        bundle = combined_g_loss(
            state.discriminator(composite), composite, target, state.extractor,
            d_loss_value=loss_d_value,
        )
    except ValueError as exc:  # the bundle refuses non-finite components
        dump = _dump_bad_batch(state, batch)
        raise TrainingDiverged(
            f"non-finite generator loss at step {state.step}; batch dumped to {dump}"
        ) from exc
    bundle.g_total.backward()
    state.opt_g.step()

    state.step += 1
    out = LossBundle(**{k: v for k, v in bundle.to_floats().items()})
    state.loss_history.append(out)
    return state, out


def batch_indices(n_frames: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Frame indices of one training batch, a pure function of (seed, step).

    Frames are consumed in seeded per-epoch shuffles; a batch that would
    cross an epoch boundary wraps into the next epoch's order.
    """
    if n_frames < 1:
        raise ValueError("need at least one training frame")
    out: list[int] = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n_frames)
        order = np.random.default_rng([seed, 1000, epoch]).permutation(n_frames)
        take = min(batch_size - len(out), n_frames - offset)
        out.extend(int(i) for i in order[offset:offset + take])
        pos += take
    return out


def _make_batch(frames: list[Frame], config: TrainConfig, step: int) -> list[AugmentedSample]:
    # Cuts are drawn per sample from the cuts that frame's fan can absorb;
    # the rng is keyed on (seed, step) so resumed runs replay identically.
    idx = batch_indices(len(frames), config.batch_size, config.seed, step)
    rng = np.random.default_rng([config.seed, 2000, step])
    return [
        augment(frames[i], sample_feasible_cut(rng, frames[i].cone.spread_deg))
        for i in idx
    ]


def _checkpoint_from_state(state: TrainState) -> Checkpoint:
    # state_dict() aliases the live parameter tensors; snapshot copies so the
    # checkpoint stays frozen while training continues.
    return Checkpoint(
        g_config=state.generator.config,
        d_config=state.discriminator.config,
        g_state={k: v.detach().clone() for k, v in state.generator.state_dict().items()},
        d_state={k: v.detach().clone() for k, v in state.discriminator.state_dict().items()},
        opt_g_state=copy.deepcopy(state.opt_g.state_dict()),
        opt_d_state=copy.deepcopy(state.opt_d.state_dict()),
        step=state.step,
        resolution=state.config.resolution,
        seed=state.config.seed,
        extra={
            "g_parameters": count_parameters(state.generator),
            "d_parameters": count_parameters(state.discriminator),
        },
    )


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig,
                          extractor: torch.nn.Module | None = None,
                          out_dir: str | Path | None = None) -> TrainState:
    generator, discriminator = ckpt.build_models()
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.lr_g, betas=(config.adam_beta1, config.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=config.lr_d, betas=(config.adam_beta1, config.adam_beta2)
    )
    if ckpt.opt_g_state is not None:
        opt_g.load_state_dict(ckpt.opt_g_state)
    if ckpt.opt_d_state is not None:
        opt_d.load_state_dict(ckpt.opt_d_state)
    if extractor is None:
        extractor = load_feature_extractor(None, seed=ckpt.seed)
    return TrainState(
        config=config,
        generator=generator,
        discriminator=discriminator,
        opt_g=opt_g,
        opt_d=opt_d,
        extractor=extractor,
        step=ckpt.step,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )


def fit(
    config: TrainConfig,
    manifest: Manifest,
    out_dir: str | Path,
    extractor: torch.nn.Module | None = None,
    resume_from: str | Path | None = None,
) -> Path:
    """Run the training loop; returns the path of the final checkpoint.

    Writes `train_log.jsonl` (one record per step), periodic
    `checkpoint_step*.pt` files, and a final `checkpoint.pt` under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = load_split(manifest, "train", config.resolution)
    if not frames:
        raise ValueError("manifest has an empty train split")

    if resume_from is not None:
        state = state_from_checkpoint(load_checkpoint(resume_from), config, extractor, out_dir)
        log_mode = "a"
    else:
        state = init_state(config, extractor=extractor, out_dir=out_dir)
        log_mode = "w"

    final_path = out_dir / "checkpoint.pt"
    with open(out_dir / "train_log.jsonl", log_mode) as log:
        while state.step < config.steps:
            step_started = time.time()
            batch = _make_batch(frames, config, state.step)
            state, bundle = train_step(state, batch)
            record = {"step": state.step, **bundle.to_floats(),
                      "wall_time": time.time() - step_started}
            log.write(json.dumps(record) + "\n")
            if state.step % 50 == 0 or state.step == config.steps:
                logger.info(
                    "step %d/%d d=%.4f g_adv=%.4f g_lpips=%.4f",
                    state.step, config.steps, record["d_loss"], record["g_adv"], record["g_lpips"],
                )
            if config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_step{state.step:06d}.pt",
                                _checkpoint_from_state(state))
    save_checkpoint(final_path, _checkpoint_from_state(state))
    return final_path


def held_out_cut_l1(generator: Generator, frames: list[Frame], cut_deg: float) -> float:
    """Mean absolute error inside the cut region over a fixed evaluation set."""
    generator.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for frame in frames:
            s = augment(frame, cut_deg)
            x = torch.from_numpy(
                np.stack([s.masked_image, s.augment_mask.astype(np.float32)])
            ).unsqueeze(0)
            pred = generator(x)[0, 0].numpy()
            region = (s.full_mask - s.augment_mask).astype(bool)
            if region.any():
                total += float(np.abs(pred[region] - s.target[region]).sum())
                count += int(region.sum())
    if count == 0:
        raise ValueError("cut region is empty across the evaluation frames")
    return total / count


def generated_cut_std(generator: Generator, frames: list[Frame], cut_deg: float) -> float:
    """Mean per-image std of generated pixels inside the cut region.

    Guards against constant-output collapse; a healthy generator keeps
    texture in the region it fills.
    """
    generator.eval()
    stds = []
    with torch.no_grad():
        for frame in frames:
            s = augment(frame, cut_deg)
            x = torch.from_numpy(
                np.stack([s.masked_image, s.augment_mask.astype(np.float32)])
            ).unsqueeze(0)
            pred = generator(x)[0, 0].numpy()
            region = (s.full_mask - s.augment_mask).astype(bool)
            if region.any():
                stds.append(float(pred[region].std()))
    if not stds:
        raise ValueError("cut region is empty across the evaluation frames")
    return float(np.mean(stds))
