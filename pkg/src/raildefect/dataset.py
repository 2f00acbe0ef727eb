"""Synthetic rail-surface corpus: generation, manifest IO, and augmentation merge.

Images are 8-bit grayscale PNGs laid out as ``<root>/<split>/<class>/<id>.png``
with a single ``manifest.json`` at the root (schema below). Every image shows a
vertical bright rail band on a dark textured background; defect classes differ
in what is drawn on or near the band:

* scratch        - thin dark line crossing the band
* inside-scratch - thin dark line hugging the band's inner edge
* shelling       - irregular dark blob; a low-contrast "superficial" variant
                   is rendered for a configurable fraction of shelling images

Manifest JSON schema (version 1)::

    {
      "schema_version": 1,
      "corpus_seed": int,
      "image_size": int,
      "normalization": {"mean": float, "std": float},
      "class_counts": {"train": {"normal": int, ...}, "test": {...}},
      "records": [
        {"id": str, "relative_path": str, "label": str, "split": str,
         "provenance": "corpus" | "gan_generated", "source_id": str | null},
        ...
      ]
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError, ValidationError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

SPLITS = ("train", "test")
PROVENANCES = ("corpus", "gan_generated")


class DefectClass(IntEnum):
    """The four rail-surface classes, code order fixed."""

    NORMAL = 0
    SCRATCH = 1
    INSIDE_SCRATCH = 2
    SHELLING = 3

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "DefectClass":
        try:
            return _LABEL_TO_CLASS[label]
        except KeyError:
            raise ManifestError(f"unknown class label {label!r}") from None


_CLASS_LABELS = {
    DefectClass.NORMAL: "normal",
    DefectClass.SCRATCH: "scratch",
    DefectClass.INSIDE_SCRATCH: "inside-scratch",
    DefectClass.SHELLING: "shelling",
}
_LABEL_TO_CLASS = {v: k for k, v in _CLASS_LABELS.items()}

CLASS_ORDER = tuple(DefectClass)
NUM_CLASSES = len(CLASS_ORDER)


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image in the corpus."""

    id: str
    relative_path: str
    label: DefectClass
    split: str
    provenance: str = "corpus"
    source_id: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "relative_path": self.relative_path,
            "label": self.label.label,
            "split": self.split,
            "provenance": self.provenance,
            "source_id": self.source_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        missing = {"id", "relative_path", "label", "split"} - set(obj)
        if missing:
            raise ManifestError(
                f"record {obj.get('id', '<no id>')!r} missing fields {sorted(missing)}"
            )
        rec = cls(
            id=str(obj["id"]),
            relative_path=str(obj["relative_path"]),
            label=DefectClass.from_label(obj["label"]),
            split=str(obj["split"]),
            provenance=str(obj.get("provenance", "corpus")),
            source_id=obj.get("source_id"),
        )
        rec.validate()
        return rec

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: bad split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ManifestError(
                f"record {self.id!r}: bad provenance {self.provenance!r}"
            )
        if self.provenance == "gan_generated" and not self.source_id:
            raise ManifestError(
                f"record {self.id!r}: gan_generated records must carry source_id"
            )


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs for the procedural corpus generator.

    Default counts are the full-scale class table scaled down to desk size
    while preserving the imbalance (shelling an order of magnitude rarer).
    """

    image_size: int = 64
    train_counts: tuple[int, int, int, int] = (300, 80, 80, 12)
    test_counts: tuple[int, int, int, int] = (40, 20, 20, 8)
    stripe_width: float = 2.0
    blob_radius: tuple[float, float] = (3.0, 7.0)
    noise_amplitude: float = 8.0
    superficial_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        for counts in (self.train_counts, self.test_counts):
            if len(counts) != NUM_CLASSES or any(c < 0 for c in counts):
                raise ConfigError(f"per-class counts must be 4 values >= 0, got {counts}")
        if not 0.0 <= self.superficial_fraction <= 1.0:
            raise ConfigError("superficial_fraction must be in [0, 1]")
        if self.blob_radius[0] <= 0 or self.blob_radius[1] < self.blob_radius[0]:
            raise ConfigError(f"bad blob_radius range {self.blob_radius}")

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "train_counts": list(self.train_counts),
            "test_counts": list(self.test_counts),
            "stripe_width": self.stripe_width,
            "blob_radius": list(self.blob_radius),
            "noise_amplitude": self.noise_amplitude,
            "superficial_fraction": self.superficial_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusSpec":
        spec = cls(
            image_size=int(obj.get("image_size", 64)),
            train_counts=tuple(obj.get("train_counts", (300, 80, 80, 12))),
            test_counts=tuple(obj.get("test_counts", (40, 20, 20, 8))),
            stripe_width=float(obj.get("stripe_width", 2.0)),
            blob_radius=tuple(obj.get("blob_radius", (3.0, 7.0))),
            noise_amplitude=float(obj.get("noise_amplitude", 8.0)),
            superficial_fraction=float(obj.get("superficial_fraction", 0.5)),
            seed=int(obj.get("seed", 0)),
        )
        spec.validate()
        return spec


@dataclass
class Manifest:
    """Inventory of the labeled corpus; single source of truth for splits.

    ``root_dir`` is derived from where the manifest lives and is not part of
    the serialized document; relative paths resolve against it.
    """

    records: list[ImageRecord]
    corpus_seed: int
    image_size: int
    normalization: tuple[float, float]  # (mean, std) of train pixels in [0,1]
    root_dir: Optional[Path] = None
    class_counts: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.class_counts:
            self.class_counts = compute_class_counts(self.records)

    def resolve(self, record: ImageRecord) -> Path:
        if self.root_dir is None:
            raise ValidationError("manifest has no root_dir; load or save it first")
        return Path(self.root_dir) / record.relative_path

    def select(
        self,
        split: Optional[str] = None,
        label: Optional[DefectClass] = None,
        provenance: Optional[str] = None,
    ) -> list[ImageRecord]:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if label is not None and r.label != label:
                continue
            if provenance is not None and r.provenance != provenance:
                continue
            out.append(r)
        return out

    def count(self, split: str, label: DefectClass) -> int:
        return self.class_counts.get(split, {}).get(label.label, 0)

    def validate(self, check_files: bool = True) -> None:
        seen_ids: set[str] = set()
        seen_paths: set[str] = set()
        for rec in self.records:
            rec.validate()
            if rec.id in seen_ids:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            if rec.relative_path in seen_paths:
                raise ValidationError(f"duplicate relative_path {rec.relative_path!r}")
            seen_ids.add(rec.id)
            seen_paths.add(rec.relative_path)
        if self.class_counts != compute_class_counts(self.records):
            raise ValidationError("class_counts do not match the record list")
        if check_files and self.root_dir is not None:
            missing = [
                r.relative_path for r in self.records if not self.resolve(r).is_file()
            ]
            if missing:
                raise ValidationError(
                    "manifest references missing image files: " + ", ".join(missing)
                )

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "corpus_seed": self.corpus_seed,
            "image_size": self.image_size,
            "normalization": {
                "mean": self.normalization[0],
                "std": self.normalization[1],
            },
            "class_counts": self.class_counts,
            "records": [r.to_json() for r in self.records],
        }


def compute_class_counts(records: Iterable[ImageRecord]) -> dict:
    counts = {
        split: {c.label: 0 for c in CLASS_ORDER} for split in SPLITS
    }
    for r in records:
        counts[r.split][r.label.label] += 1
    return counts


# ----------------------------- rendering -----------------------------------

BAND_VALUE = 175.0
BACKGROUND_VALUE = 45.0


def _smooth_noise(rng: np.random.Generator, size: int, scale: int, amp: float) -> np.ndarray:
    """Low-frequency texture: coarse noise grid upsampled bilinearly."""
    coarse = rng.normal(0.0, amp, size=(scale, scale))
    xs = np.linspace(0, scale - 1, size)
    ix = np.clip(xs.astype(int), 0, scale - 2)
    fx = xs - ix
    rows = coarse[ix, :] * (1 - fx)[:, None] + coarse[ix + 1, :] * fx[:, None]
    cols = rows[:, ix] * (1 - fx)[None, :] + rows[:, ix + 1] * fx[None, :]
    return cols


def _band_geometry(rng: np.random.Generator, size: int) -> tuple[float, float]:
    """Center and half-width of the rail band, jittered per image."""
    cx = size / 2.0 + rng.uniform(-size * 0.05, size * 0.05)
    half_w = size * rng.uniform(0.17, 0.21)
    return cx, half_w


def _render_base(
    rng: np.random.Generator, size: int, noise_amp: float
) -> tuple[np.ndarray, float, float]:
    """Dark textured background with a vertical bright rail band."""
    img = np.full((size, size), BACKGROUND_VALUE, dtype=np.float64)
    img += _smooth_noise(rng, size, 5, 6.0)
    img += rng.normal(0.0, noise_amp, size=(size, size))

    cx, half_w = _band_geometry(rng, size)
    x = np.arange(size, dtype=np.float64)
    edge = 2.0  # soft shoulder, pixels
    profile = np.clip((half_w - np.abs(x - cx)) / edge + 0.5, 0.0, 1.0)
    band_gain = BAND_VALUE - BACKGROUND_VALUE + rng.uniform(-10.0, 10.0)
    img += profile[None, :] * band_gain

    # vertical running-sheen streaks inside the band
    streak = rng.normal(0.0, 4.0, size=size)
    img += profile[None, :] * streak[None, :]
    shade = np.linspace(rng.uniform(-5, 5), rng.uniform(-5, 5), size)
    img += shade[:, None]
    return img, cx, half_w


def _stamp_line(
    img: np.ndarray,
    x0: float,
    y0: float,
    x1: float,
    y1: float,
    width: float,
    delta: float,
) -> None:
    """Darken an anti-aliased line segment by ``delta``."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0:
        return
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg_len2, 0.0, 1.0)
    dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
    mask = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    img -= mask * delta


def _draw_scratch(
    rng: np.random.Generator, img: np.ndarray, cx: float, half_w: float, width: float
) -> None:
    """Thin dark line crossing the band, roughly horizontal."""
    size = img.shape[0]
    y_mid = rng.uniform(0.2, 0.8) * size
    slope = rng.uniform(-0.6, 0.6)
    x0 = cx - half_w - rng.uniform(1, 4)
    x1 = cx + half_w + rng.uniform(1, 4)
    y0 = y_mid + slope * (x0 - cx)
    y1 = y_mid + slope * (x1 - cx)
    delta = rng.uniform(55.0, 95.0)
    _stamp_line(img, x0, y0, x1, y1, width, delta)


def _draw_inside_scratch(
    rng: np.random.Generator, img: np.ndarray, cx: float, half_w: float, width: float
) -> None:
    """Vertical-ish dark line offset to the band's inner (left) edge."""
    size = img.shape[0]
    x_edge = cx - half_w + rng.uniform(0.5, 3.0)
    tilt = rng.uniform(-0.08, 0.08)
    y0 = rng.uniform(0.0, 0.15) * size
    y1 = rng.uniform(0.85, 1.0) * size
    x0 = x_edge + tilt * (y0 - size / 2)
    x1 = x_edge + tilt * (y1 - size / 2)
    delta = rng.uniform(55.0, 95.0)
    _stamp_line(img, x0, y0, x1, y1, width, delta)


def _draw_shelling(
    rng: np.random.Generator,
    img: np.ndarray,
    cx: float,
    half_w: float,
    radius_range: tuple[float, float],
    superficial: bool,
) -> None:
    """Irregular dark blob inside the band; superficial = low contrast."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    n_lobes = int(rng.integers(2, 5))
    bx = cx + rng.uniform(-half_w * 0.4, half_w * 0.4)
    by = rng.uniform(0.25, 0.75) * size
    mask = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_lobes):
        r = rng.uniform(*radius_range)
        ox = bx + rng.uniform(-r * 0.8, r * 0.8)
        oy = by + rng.uniform(-r * 0.8, r * 0.8)
        ax = r * rng.uniform(0.7, 1.3)
        ay = r * rng.uniform(0.7, 1.3)
        d = ((xx - ox) / ax) ** 2 + ((yy - oy) / ay) ** 2
        mask = np.maximum(mask, np.clip(1.5 - d, 0.0, 1.0))
    # ragged edge
    rough = 1.0 + 0.35 * np.clip(_smooth_noise(rng, size, 8, 1.0), -1.0, 1.0)
    mask = np.clip(mask * rough, 0.0, 1.0)
    if superficial:
        delta = rng.uniform(12.0, 22.0)
    else:
        delta = rng.uniform(50.0, 85.0)
    img -= mask * delta


def render_image(
    spec: CorpusSpec, label: DefectClass, rng: np.random.Generator
) -> np.ndarray:
    """Render one uint8 image for ``label`` using draws from ``rng``."""
    img, cx, half_w = _render_base(rng, spec.image_size, spec.noise_amplitude)
    if label == DefectClass.SCRATCH:
        _draw_scratch(rng, img, cx, half_w, spec.stripe_width)
    elif label == DefectClass.INSIDE_SCRATCH:
        _draw_inside_scratch(rng, img, cx, half_w, spec.stripe_width)
    elif label == DefectClass.SHELLING:
        superficial = bool(rng.random() < spec.superficial_fraction)
        _draw_shelling(rng, img, cx, half_w, spec.blob_radius, superficial)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# ----------------------------- image IO ------------------------------------

def write_png(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    """Load a grayscale PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


# ----------------------------- operations ----------------------------------

def generate_corpus(spec: CorpusSpec, out_dir: Path | str) -> Manifest:
    """Write the per-class corpus under ``out_dir`` and return its manifest.

    Deterministic for a fixed spec: each image draws from an RNG seeded by
    (seed, split, class, index), so files are byte-identical across runs and
    independent of generation order.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ValidationError(f"output directory not writable: {out_dir}")

    records: list[ImageRecord] = []
    pixel_sum = 0.0
    pixel_sq_sum = 0.0
    pixel_n = 0
    for split_idx, (split, counts) in enumerate(
        (("train", spec.train_counts), ("test", spec.test_counts))
    ):
        for cls in CLASS_ORDER:
            for i in range(counts[cls.value]):
                rng = np.random.default_rng([spec.seed, split_idx, cls.value, i])
                pixels = render_image(spec, cls, rng)
                rec_id = f"{split}-{cls.label}-{i:04d}"
                rel = f"{split}/{cls.label}/{rec_id}.png"
                write_png(out_dir / rel, pixels)
                records.append(
                    ImageRecord(id=rec_id, relative_path=rel, label=cls, split=split)
                )
                if split == "train":
                    scaled = pixels.astype(np.float64) / 255.0
                    pixel_sum += float(scaled.sum())
                    pixel_sq_sum += float((scaled**2).sum())
                    pixel_n += scaled.size

    if pixel_n > 0:
        mean = pixel_sum / pixel_n
        var = max(pixel_sq_sum / pixel_n - mean * mean, 1e-12)
        std = float(np.sqrt(var))
    else:
        mean, std = 0.5, 0.25

    manifest = Manifest(
        records=records,
        corpus_seed=spec.seed,
        image_size=spec.image_size,
        normalization=(round(mean, 8), round(std, 8)),
        root_dir=out_dir,
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    """Write the manifest JSON atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.validate(check_files=False)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    manifest.root_dir = path.parent


def load_manifest(path: Path | str, check_files: bool = True) -> Manifest:
    """Load and fully validate a manifest; root_dir = the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "records" not in doc:
        raise ManifestError(f"manifest {path} missing 'records'")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"manifest {path}: unsupported schema_version {doc.get('schema_version')!r}"
        )
    records = [ImageRecord.from_json(obj) for obj in doc["records"]]
    norm = doc.get("normalization", {})
    manifest = Manifest(
        records=records,
        corpus_seed=int(doc.get("corpus_seed", 0)),
        image_size=int(doc.get("image_size", 64)),
        normalization=(float(norm.get("mean", 0.5)), float(norm.get("std", 0.25))),
        root_dir=path.parent,
        class_counts=doc.get("class_counts", {}),
    )
    manifest.validate(check_files=check_files)
    return manifest


def merge_augmented(
    base: Manifest,
    accepted: Sequence[ImageRecord],
    target_class: DefectClass = DefectClass.SHELLING,
) -> Manifest:
    """Return base plus the accepted GAN records; base is left untouched.

    Accepted records must be gan_generated, train split, and carry the target
    class label; colliding ids (or paths) are rejected with the full list.
    """
    for rec in accepted:
        if rec.provenance != "gan_generated":
            raise ValidationError(f"record {rec.id!r}: provenance must be gan_generated")
        if rec.split != "train":
            raise ValidationError(f"record {rec.id!r}: split must be train")
        if rec.label != target_class:
            raise ValidationError(
                f"record {rec.id!r}: label must be {target_class.label}"
            )
    base_ids = {r.id for r in base.records}
    base_paths = {r.relative_path for r in base.records}
    colliding = sorted(
        {r.id for r in accepted if r.id in base_ids}
        | {r.id for r in accepted if r.relative_path in base_paths}
    )
    if colliding:
        raise ValidationError(f"id/path collisions with base manifest: {colliding}")

    merged = Manifest(
        records=list(base.records) + list(accepted),
        corpus_seed=base.corpus_seed,
        image_size=base.image_size,
        normalization=base.normalization,
        root_dir=base.root_dir,
    )
    merged.validate(check_files=False)
    return merged
