"""Unpaired image translation between normal rail and shelling defect.

Least-squares adversarial objective, cycle-consistency and identity terms,
history buffers of generated images for the discriminator updates, and bulk
synthesis of candidate defect images.

Generators and the classifier live in different pixel ranges: generators map
[-1,1] to [-1,1] (tanh output), images on disk and in the classifier are
[0,1]. ``to_gan_range``/``from_gan_range`` own that conversion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .ckpt import load_checkpoint, save_checkpoint
from .dataset import (
    DefectClass,
    ImageRecord,
    Manifest,
    read_image,
    write_png,
)
from .errors import CheckpointError, ConfigError, TrainingDivergedError, ValidationError

HISTORY_COLUMNS = (
    "step",
    "loss_D_A",
    "loss_D_B",
    "loss_G_adv",
    "loss_cycle",
    "loss_identity",
    "loss_G_total",
)


def to_gan_range(x01: torch.Tensor | np.ndarray):
    """[0,1] pixels -> [-1,1] generator domain."""
    return x01 * 2.0 - 1.0


def from_gan_range(xpm1: torch.Tensor | np.ndarray):
    """[-1,1] generator domain -> [0,1] pixels."""
    return (xpm1 + 1.0) / 2.0


def quantize_to_uint8(x01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x01 * 255.0), 0, 255).astype(np.uint8)


@dataclass
class GanConfig:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    learning_rate: float = 2e-4
    epochs: int = 20
    pool_size: int = 50
    seed: int = 0
    batch_size: int = 4
    steps_per_epoch: Optional[int] = None  # None: ceil(max(|A|,|B|)/batch)
    beta1: float = 0.0  # adaptive-moment updates without momentum by default
    beta2: float = 0.999
    decay_start_frac: float = 2.0 / 3.0  # linear lr decay over the final third
    base_channels: int = 32
    n_res_blocks: int = 3
    image_size: int = 64

    def validate(self) -> None:
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ConfigError("lambda weights must be >= 0")
        if self.pool_size < 0:
            raise ConfigError("pool_size must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return {
            "lambda_cycle": self.lambda_cycle,
            "lambda_identity": self.lambda_identity,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "pool_size": self.pool_size,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "steps_per_epoch": self.steps_per_epoch,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "decay_start_frac": self.decay_start_frac,
            "base_channels": self.base_channels,
            "n_res_blocks": self.n_res_blocks,
            "image_size": self.image_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GanConfig":
        cfg = cls(**{k: obj[k] for k in obj if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder, residual blocks, decoder; tanh keeps outputs in [-1,1].

    Desk scale: c7s1-32, d64, 3 residual blocks, u32, c7s1-1.
    """

    def __init__(self, base_channels: int = 32, n_res_blocks: int = 3):
        super().__init__()
        b = base_channels
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, b, 7),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
        ]
        layers += [_ResBlock(2 * b) for _ in range(n_res_blocks)]
        layers += [
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(b, 1, 7),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Patch-level real/fake classifier; output is a spatial score grid."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        b = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 1, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class GanCheckpoint:
    g_ab: Generator
    g_ba: Generator
    d_a: Discriminator
    d_b: Discriminator
    config: GanConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


class ImagePool:
    """Buffer of past generated images sampled for discriminator updates.

    Below capacity the fresh image is stored and returned unchanged. At
    capacity each returned image is, independently with probability 1/2,
    a stored one (swapped out for the fresh image) or the fresh image.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ConfigError("pool capacity must be >= 0")
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.images)

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return batch
        out = []
        for i in range(batch.shape[0]):
            img = batch[i : i + 1].detach()
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                j = int(self.rng.integers(self.capacity))
                out.append(self.images[j])
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, dim=0)


# ----------------------------- losses ---------------------------------------

def lsgan_losses(
    d: nn.Module, real_batch: torch.Tensor, fake_batch: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial pair for one discriminator.

    loss_D = 1/2 mean((D(real)-1)^2) + 1/2 mean(D(fake)^2)
    loss_G_component = mean((D(fake)-1)^2)
    """
    if real_batch.numel() == 0 or fake_batch.numel() == 0:
        raise ValidationError("adversarial batches must be non-empty")
    if real_batch.shape[1:] != fake_batch.shape[1:]:
        raise ValidationError(
            f"batch shape mismatch: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}"
        )
    score_real = d(real_batch)
    score_fake = d(fake_batch)
    loss_d = 0.5 * ((score_real - 1.0) ** 2).mean() + 0.5 * (score_fake**2).mean()
    loss_g = ((score_fake - 1.0) ** 2).mean()
    return loss_d, loss_g


def cycle_loss(
    g_ab: nn.Module, g_ba: nn.Module, batch_a: torch.Tensor, batch_b: torch.Tensor
) -> torch.Tensor:
    """Mean L1 of both round trips; zero iff both reconstruct exactly."""
    if batch_a.numel() == 0 or batch_b.numel() == 0:
        raise ValidationError("cycle batches must be non-empty")
    rec_a = g_ba(g_ab(batch_a))
    rec_b = g_ab(g_ba(batch_b))
    if rec_a.shape != batch_a.shape or rec_b.shape != batch_b.shape:
        raise ValidationError("generator changed the batch shape")
    return (rec_a - batch_a).abs().mean() + (rec_b - batch_b).abs().mean()


def identity_loss(
    g_ab: nn.Module, g_ba: nn.Module, batch_a: torch.Tensor, batch_b: torch.Tensor
) -> torch.Tensor:
    """Mean L1 of G_AB on B and G_BA on A; discourages gratuitous edits."""
    id_b = g_ab(batch_b)
    id_a = g_ba(batch_a)
    return (id_b - batch_b).abs().mean() + (id_a - batch_a).abs().mean()


# ----------------------------- training -------------------------------------

def _domain_tensor(manifest: Manifest, records: Sequence[ImageRecord]) -> torch.Tensor:
    imgs = np.stack([read_image(manifest.resolve(r)) for r in records])
    x = torch.from_numpy(imgs).unsqueeze(1).float()
    return to_gan_range(x)


class _DomainSampler:
    """Cycles a domain in shuffled order; pure function of its seed."""

    def __init__(self, data: torch.Tensor, batch_size: int, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(data.shape[0])
        self.pos = 0

    def next(self) -> torch.Tensor:
        idx = []
        for _ in range(self.batch_size):
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.data.shape[0])
                self.pos = 0
            idx.append(int(self.order[self.pos]))
            self.pos += 1
        return self.data[torch.tensor(idx, dtype=torch.long)]


def build_gan(config: GanConfig) -> GanCheckpoint:
    """Seeded construction of the four networks."""
    torch.manual_seed(config.seed)
    g_ab = Generator(config.base_channels, config.n_res_blocks)
    g_ba = Generator(config.base_channels, config.n_res_blocks)
    d_a = Discriminator(config.base_channels)
    d_b = Discriminator(config.base_channels)
    for net in (g_ab, g_ba, d_a, d_b):
        init_weights(net)
    return GanCheckpoint(g_ab=g_ab, g_ba=g_ba, d_a=d_a, d_b=d_b, config=config)


def train_cyclegan(
    manifest: Manifest,
    domain_a: DefectClass = DefectClass.NORMAL,
    domain_b: DefectClass = DefectClass.SHELLING,
    config: GanConfig = GanConfig(),
    log_fn: Optional[Callable[[str], None]] = None,
) -> GanCheckpoint:
    """Alternating generator/discriminator updates on the two train domains.

    The logged loss_cycle/loss_identity columns carry the lambda-weighted
    contributions, so loss_G_total = loss_G_adv + loss_cycle + loss_identity
    at every step.
    """
    config.validate()
    recs_a = manifest.select(split="train", label=domain_a)
    recs_b = manifest.select(split="train", label=domain_b)
    if not recs_a or not recs_b:
        raise ValidationError(
            f"both domains need >= 1 train image, got {len(recs_a)} {domain_a.label}"
            f" / {len(recs_b)} {domain_b.label}"
        )

    data_a = _domain_tensor(manifest, recs_a)
    data_b = _domain_tensor(manifest, recs_b)

    ckpt = build_gan(config)
    g_ab, g_ba, d_a, d_b = ckpt.g_ab, ckpt.g_ba, ckpt.d_a, ckpt.d_b

    opt_g = torch.optim.Adam(
        list(g_ab.parameters()) + list(g_ba.parameters()),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
    )
    opt_d = torch.optim.Adam(
        list(d_a.parameters()) + list(d_b.parameters()),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
    )

    steps_per_epoch = config.steps_per_epoch
    if steps_per_epoch is None:
        steps_per_epoch = math.ceil(
            max(data_a.shape[0], data_b.shape[0]) / config.batch_size
        )

    total_steps = config.epochs * steps_per_epoch

    def lr_scale(step: int) -> float:
        if total_steps == 0:
            return 1.0
        start = config.decay_start_frac * total_steps
        if step < start:
            return 1.0
        return max(0.0, 1.0 - (step - start) / max(total_steps - start, 1.0))

    sampler_a = _DomainSampler(data_a, config.batch_size, config.seed * 1000003 + 1)
    sampler_b = _DomainSampler(data_b, config.batch_size, config.seed * 1000003 + 2)
    pool_a = ImagePool(config.pool_size, seed=config.seed * 1000003 + 3)
    pool_b = ImagePool(config.pool_size, seed=config.seed * 1000003 + 4)

    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            scale = lr_scale(step)
            for group in opt_g.param_groups:
                group["lr"] = config.learning_rate * scale
            for group in opt_d.param_groups:
                group["lr"] = config.learning_rate * scale

            a = sampler_a.next()
            b = sampler_b.next()

            # generator update
            fake_b = g_ab(a)
            fake_a = g_ba(b)
            adv_b = ((d_b(fake_b) - 1.0) ** 2).mean()
            adv_a = ((d_a(fake_a) - 1.0) ** 2).mean()
            loss_g_adv = adv_a + adv_b
            rec_a = g_ba(fake_b)
            rec_b = g_ab(fake_a)
            raw_cycle = (rec_a - a).abs().mean() + (rec_b - b).abs().mean()
            if config.lambda_identity > 0:
                raw_identity = (g_ab(b) - b).abs().mean() + (g_ba(a) - a).abs().mean()
            else:
                raw_identity = torch.zeros(())
            w_cycle = config.lambda_cycle * raw_cycle
            w_identity = config.lambda_identity * raw_identity
            loss_g_total = loss_g_adv + w_cycle + w_identity
            opt_g.zero_grad()
            loss_g_total.backward()
            opt_g.step()

            # discriminator update on pooled fakes
            fake_a_pooled = pool_a.query(fake_a.detach())
            fake_b_pooled = pool_b.query(fake_b.detach())
            loss_d_a, _ = lsgan_losses(d_a, a, fake_a_pooled)
            loss_d_b, _ = lsgan_losses(d_b, b, fake_b_pooled)
            loss_d = loss_d_a + loss_d_b
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            row = {
                "step": step,
                "loss_D_A": float(loss_d_a.detach()),
                "loss_D_B": float(loss_d_b.detach()),
                "loss_G_adv": float(loss_g_adv.detach()),
                "loss_cycle": float(w_cycle.detach()),
                "loss_identity": float(w_identity.detach()),
                "loss_G_total": float(loss_g_total.detach()),
            }
            for name, value in row.items():
                if name != "step" and not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite {name} at step {step} (epoch {epoch})"
                    )
            ckpt.history.append(row)
            step += 1
        ckpt.epoch = epoch + 1
        if log_fn is not None:
            last = ckpt.history[-1]
            log_fn(
                f"epoch {epoch + 1}/{config.epochs}"
                f" G={last['loss_G_total']:.3f} D_A={last['loss_D_A']:.3f}"
                f" D_B={last['loss_D_B']:.3f}"
            )
    for net in (g_ab, g_ba, d_a, d_b):
        net.eval()
    return ckpt


def save_history_csv(history: Sequence[dict], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow(
                [row["step"]] + [f"{row[c]:.8f}" for c in HISTORY_COLUMNS[1:]]
            )


# ----------------------------- synthesis ------------------------------------

def synthesize(
    checkpoint: GanCheckpoint,
    manifest: Manifest,
    n: int,
    seed: int,
    out_subdir: str = "gan",
    source_class: DefectClass = DefectClass.NORMAL,
    target_class: DefectClass = DefectClass.SHELLING,
    id_prefix: str = "gan",
) -> list[ImageRecord]:
    """Translate n train images of the source class; write PNGs + records.

    Sources are drawn without replacement while n fits the pool, with
    replacement beyond that. Deterministic per (checkpoint, seed, n).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    sources = manifest.select(split="train", label=source_class)
    if not sources:
        raise ValidationError(f"no train images of class {source_class.label!r}")
    if manifest.root_dir is None:
        raise ValidationError("manifest has no root_dir")

    rng = np.random.default_rng(seed)
    if n <= len(sources):
        idx = rng.choice(len(sources), size=n, replace=False)
    else:
        idx = rng.choice(len(sources), size=n, replace=True)

    out_dir = Path(manifest.root_dir) / out_subdir
    out_dir.mkdir(parents=True, exist_ok=True)

    g = checkpoint.g_ab
    g.eval()
    records: list[ImageRecord] = []
    with torch.no_grad():
        for start in range(0, n, 16):
            chunk = idx[start : start + 16]
            batch = np.stack(
                [read_image(manifest.resolve(sources[int(i)])) for i in chunk]
            )
            x = to_gan_range(torch.from_numpy(batch).unsqueeze(1).float())
            y = g(x)
            pixels01 = from_gan_range(y.squeeze(1).numpy())
            for k, src_i in enumerate(chunk):
                i = start + k
                rec_id = f"{id_prefix}-{seed}-{i:04d}"
                rel = f"{out_subdir}/{rec_id}.png"
                write_png(Path(manifest.root_dir) / rel, quantize_to_uint8(pixels01[k]))
                records.append(
                    ImageRecord(
                        id=rec_id,
                        relative_path=rel,
                        label=target_class,
                        split="train",
                        provenance="gan_generated",
                        source_id=sources[int(src_i)].id,
                    )
                )
    return records


# ----------------------------- persistence ----------------------------------

def save_gan(ckpt: GanCheckpoint, path: Path | str) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, net in (
        ("g_ab", ckpt.g_ab),
        ("g_ba", ckpt.g_ba),
        ("d_a", ckpt.d_a),
        ("d_b", ckpt.d_b),
    ):
        for k, v in net.state_dict().items():
            tensors[f"{prefix}.{k}"] = v.detach().numpy()
    meta = {
        "kind": "cyclegan",
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_json(),
    }
    save_checkpoint(path, tensors, meta)


def load_gan(path: Path | str) -> GanCheckpoint:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "cyclegan":
        raise CheckpointError(f"{path} is not a cyclegan checkpoint")
    config = GanConfig.from_json(meta["config"])
    ckpt = build_gan(config)
    ckpt.epoch = int(meta.get("epoch", 0))
    for prefix, net in (
        ("g_ab", ckpt.g_ab),
        ("g_ba", ckpt.g_ba),
        ("d_a", ckpt.d_a),
        ("d_b", ckpt.d_b),
    ):
        state = net.state_dict()
        for name, tensor in state.items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor for layer {key!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for layer {key!r}: model {tuple(tensor.shape)}"
                    f" vs checkpoint {tuple(arr.shape)}"
                )
            state[name] = torch.from_numpy(np.array(arr)).to(tensor.dtype)
        net.load_state_dict(state)
        net.eval()
    return ckpt
