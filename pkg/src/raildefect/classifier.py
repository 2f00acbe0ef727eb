"""Residual CNN defect classifier: build, fine-tune, predict, evaluate.

The backbone is a residual stack ending in global average pooling; the head
is a single linear layer mapping the pooled feature vector to 4 logits and is
replaced to match ``num_classes`` whatever the backbone was trained for.
Two presets: "desk" (3 basic-block stages, 128-dim features, CPU-friendly)
and "full" (bottleneck stages, 2048-dim features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ckpt import load_checkpoint, save_checkpoint
from .dataset import CLASS_ORDER, NUM_CLASSES, DefectClass, Manifest, read_image
from .errors import (
    CheckpointError,
    ConfigError,
    TrainingDivergedError,
    ValidationError,
)
from .metrics import EvalReport, build_eval_report

FREEZE_POLICIES = ("none", "backbone_frozen", "last_block_only")


@dataclass(frozen=True)
class BackboneConfig:
    """Depth/width of the residual backbone; feature_dim follows from it."""

    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    bottleneck: bool = False
    expansion: int = 4  # bottleneck only

    @property
    def feature_dim(self) -> int:
        last = self.stage_channels[-1]
        return last * self.expansion if self.bottleneck else last

    def to_json(self) -> dict:
        return {
            "stem_channels": self.stem_channels,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": list(self.blocks_per_stage),
            "bottleneck": self.bottleneck,
            "expansion": self.expansion,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BackboneConfig":
        return cls(
            stem_channels=int(obj["stem_channels"]),
            stage_channels=tuple(obj["stage_channels"]),
            blocks_per_stage=tuple(obj["blocks_per_stage"]),
            bottleneck=bool(obj["bottleneck"]),
            expansion=int(obj.get("expansion", 4)),
        )


BACKBONE_PRESETS = {
    "desk": BackboneConfig(),
    "full": BackboneConfig(
        stem_channels=64,
        stage_channels=(64, 128, 256, 512),
        blocks_per_stage=(3, 4, 6, 3),
        bottleneck=True,
    ),
    "micro": BackboneConfig(
        stem_channels=4, stage_channels=(4, 8), blocks_per_stage=(1, 1)
    ),
}


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    freeze_policy: str = "none"
    class_weighting: Optional[tuple[float, float, float, float]] = None
    momentum: float = 0.9

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"freeze_policy must be one of {FREEZE_POLICIES}")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "freeze_policy": self.freeze_policy,
            "class_weighting": list(self.class_weighting)
            if self.class_weighting
            else None,
            "momentum": self.momentum,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        cfg = cls(
            learning_rate=float(obj.get("learning_rate", 0.01)),
            epochs=int(obj.get("epochs", 10)),
            batch_size=int(obj.get("batch_size", 32)),
            seed=int(obj.get("seed", 0)),
            freeze_policy=str(obj.get("freeze_policy", "none")),
            class_weighting=tuple(obj["class_weighting"])
            if obj.get("class_weighting")
            else None,
            momentum=float(obj.get("momentum", 0.9)),
        )
        cfg.validate()
        return cfg


class _BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down: Optional[nn.Module] = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class _BottleneckBlock(nn.Module):
    def __init__(self, in_ch: int, mid_ch: int, stride: int, expansion: int):
        super().__init__()
        out_ch = mid_ch * expansion
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch)
        self.conv2 = nn.Conv2d(mid_ch, mid_ch, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_ch)
        self.conv3 = nn.Conv2d(mid_ch, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.down: Optional[nn.Module] = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Stem + residual stages; forward yields the last conv activation map."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, cfg.stem_channels, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        ch = cfg.stem_channels
        for stage_idx, (width, n_blocks) in enumerate(
            zip(cfg.stage_channels, cfg.blocks_per_stage)
        ):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if b == 0 else 1
                if cfg.bottleneck:
                    blocks.append(_BottleneckBlock(ch, width, stride, cfg.expansion))
                    ch = width * cfg.expansion
                else:
                    blocks.append(_BasicBlock(ch, width, stride))
                    ch = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


class ClassifierModel(nn.Module):
    """Backbone + replaceable linear head; exposes logits and features.

    ``norm_mean``/``norm_std`` are the corpus standardization stats applied
    to [0,1] pixels before the network; they are buffers so checkpoints
    carry them.
    """

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        num_classes: int = NUM_CLASSES,
        input_size: int = 64,
    ):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.num_classes = num_classes
        self.input_size = input_size
        self.feature_dim = backbone_cfg.feature_dim
        self.backbone = Backbone(backbone_cfg)
        self.head = nn.Linear(self.feature_dim, num_classes)
        self.register_buffer("norm_mean", torch.tensor(0.5))
        self.register_buffer("norm_std", torch.tensor(0.25))
        self.register_buffer("corpus_seed", torch.tensor(0, dtype=torch.int64))

    def set_normalization(self, mean: float, std: float, corpus_seed: int = 0) -> None:
        self.norm_mean.fill_(mean)
        self.norm_std.fill_(std)
        self.corpus_seed.fill_(corpus_seed)

    def normalize(self, x01: torch.Tensor) -> torch.Tensor:
        return (x01 - self.norm_mean) / self.norm_std

    def forward_with_conv(self, x01: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits, last conv activation map) for [0,1] input."""
        conv = self.backbone(self.normalize(x01))
        feat = conv.mean(dim=(2, 3))
        return self.head(feat), conv

    def features(self, x01: torch.Tensor) -> torch.Tensor:
        conv = self.backbone(self.normalize(x01))
        return conv.mean(dim=(2, 3))

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x01))


def _resolve_backbone_cfg(depth_config) -> BackboneConfig:
    if isinstance(depth_config, BackboneConfig):
        return depth_config
    if isinstance(depth_config, str):
        if depth_config not in BACKBONE_PRESETS:
            raise ConfigError(
                f"unknown depth preset {depth_config!r}; choose from {sorted(BACKBONE_PRESETS)}"
            )
        return BACKBONE_PRESETS[depth_config]
    raise ConfigError(f"depth_config must be a preset name or BackboneConfig")


def build_classifier(
    depth_config="desk",
    num_classes: int = NUM_CLASSES,
    pretrained_backbone: Optional[Path | str] = None,
    seed: int = 0,
    input_size: int = 64,
) -> ClassifierModel:
    """Construct the classifier; head always sized to ``num_classes``.

    Without pretrained weights the parameters are seeded-random, so two
    builds with the same seed are identical.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    cfg = _resolve_backbone_cfg(depth_config)
    torch.manual_seed(seed)
    model = ClassifierModel(cfg, num_classes=num_classes, input_size=input_size)
    if pretrained_backbone is not None:
        tensors, _ = load_checkpoint(pretrained_backbone)
        state = model.state_dict()
        for name, arr in tensors.items():
            if not name.startswith("backbone."):
                continue
            if name not in state:
                raise CheckpointError(f"pretrained weights name unknown layer {name!r}")
            if tuple(state[name].shape) != tuple(arr.shape):
                raise CheckpointError(
                    f"shape mismatch for layer {name!r}: model {tuple(state[name].shape)}"
                    f" vs weights {tuple(arr.shape)}"
                )
            state[name] = torch.from_numpy(np.array(arr))
        model.load_state_dict(state)
    return model


def _load_split_tensors(
    manifest: Manifest, split: str
) -> tuple[list[str], torch.Tensor, torch.Tensor]:
    records = manifest.select(split=split)
    if not records:
        raise ValidationError(f"{split} split is empty")
    imgs = np.stack([read_image(manifest.resolve(r)) for r in records])
    x = torch.from_numpy(imgs).unsqueeze(1).float()
    y = torch.tensor([r.label.value for r in records], dtype=torch.long)
    return [r.id for r in records], x, y


def _apply_freeze(model: ClassifierModel, policy: str) -> list[nn.Module]:
    """Set requires_grad per policy; returns modules to hold in eval mode."""
    frozen_modules: list[nn.Module] = []
    if policy == "backbone_frozen":
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        frozen_modules.append(model.backbone)
    elif policy == "last_block_only":
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        for p in model.backbone.stages[-1].parameters():
            p.requires_grad_(True)
        frozen_modules.append(model.backbone.stem)
        frozen_modules.extend(model.backbone.stages[:-1])
    return frozen_modules


def finetune(
    model: ClassifierModel, manifest: Manifest, config: TrainConfig
) -> tuple[ClassifierModel, list[float]]:
    """Train in place with momentum SGD; returns (model, per-epoch mean loss).

    Batch composition is a pure function of ``config.seed``. Frozen modules
    are kept in eval mode so their parameters and batch-norm buffers stay
    bit-identical.
    """
    config.validate()
    for cls in CLASS_ORDER:
        if manifest.count("train", cls) < 1:
            raise ValidationError(f"train split has no images of class {cls.label!r}")

    mean, std = manifest.normalization
    model.set_normalization(mean, std, manifest.corpus_seed)

    ids, x, y = _load_split_tensors(manifest, "train")
    n = len(ids)

    torch.manual_seed(config.seed)
    frozen_modules = _apply_freeze(model, config.freeze_policy)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    weight = (
        torch.tensor(config.class_weighting, dtype=torch.float32)
        if config.class_weighting
        else None
    )

    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    for epoch in range(config.epochs):
        model.train()
        for m in frozen_modules:
            m.eval()
        perm = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(perm[start : start + config.batch_size].copy())
            logits = model(x[idx])
            loss = F.cross_entropy(logits, y[idx], weight=weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    model.eval()
    return model, history


def _check_image(model: ClassifierModel, image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    expected = (model.input_size, model.input_size)
    if arr.shape != expected:
        raise ValidationError(f"expected image of size {expected}, got {arr.shape}")
    return torch.from_numpy(arr).reshape(1, 1, *expected)


def predict_proba(model: ClassifierModel, image: np.ndarray) -> np.ndarray:
    """Probability vector over the 4 classes for one [0,1] grayscale image."""
    x = _check_image(model, image)
    model.eval()
    with torch.no_grad():
        logits = model(x)[0].double()
        probs = torch.softmax(logits, dim=0)
    return probs.numpy()


def extract_features(model: ClassifierModel, image: np.ndarray) -> np.ndarray:
    """Penultimate feature vector (length ``model.feature_dim``)."""
    x = _check_image(model, image)
    model.eval()
    with torch.no_grad():
        feat = model.features(x)[0]
    return feat.numpy().astype(np.float64)


def predict_proba_batch(model: ClassifierModel, images: torch.Tensor) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = []
        for start in range(0, images.shape[0], 64):
            logits = model(images[start : start + 64]).double()
            out.append(torch.softmax(logits, dim=1).numpy())
    return np.concatenate(out, axis=0)


def evaluate(model: ClassifierModel, manifest: Manifest, split: str = "test") -> EvalReport:
    """Confusion matrix + one-vs-rest AUCs over a split's prediction log."""
    ids, x, y = _load_split_tensors(manifest, split)
    probs = predict_proba_batch(model, x)
    return build_eval_report(ids, y.numpy(), probs)


# ----------------------------- persistence ---------------------------------

def save_classifier(model: ClassifierModel, path: Path | str) -> None:
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {
        "kind": "classifier",
        "class_order": [c.label for c in CLASS_ORDER],
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "input_size": model.input_size,
        "backbone": model.backbone_cfg.to_json(),
        "normalization": {
            "mean": float(model.norm_mean),
            "std": float(model.norm_std),
        },
        "corpus_seed": int(model.corpus_seed),
    }
    save_checkpoint(path, tensors, meta)


def load_classifier(path: Path | str) -> ClassifierModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    cfg = BackboneConfig.from_json(meta["backbone"])
    model = ClassifierModel(
        cfg, num_classes=int(meta["num_classes"]), input_size=int(meta["input_size"])
    )
    state = model.state_dict()
    for name, tensor in state.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor for layer {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for layer {name!r}: model {tuple(tensor.shape)}"
                f" vs checkpoint {tuple(arr.shape)}"
            )
        state[name] = torch.from_numpy(np.array(arr)).to(tensor.dtype)
    model.load_state_dict(state)
    model.eval()
    return model
