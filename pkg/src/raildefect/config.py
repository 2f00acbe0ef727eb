"""Pipeline configuration: one JSON document, dotted-path overrides.

A PipelineConfig nests the per-stage configs plus the orchestration knobs
(paths, curation mode, global seed). CLI flags override config keys via
dotted paths ("train.epochs=3"); values parse as JSON with a plain-string
fallback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .classifier import BACKBONE_PRESETS, TrainConfig
from .cyclegan import GanConfig
from .dataset import CorpusSpec
from .errors import ConfigError
from .tsne import TsneConfig

CURATION_MODES = ("manual", "auto_k", "threshold")


@dataclass
class PipelineConfig:
    corpus_dir: str = "corpus"
    run_dir: str = "runs/run-0"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)
    curation_mode: str = "auto_k"
    select_k: int = 70
    select_threshold: float = 0.5
    synth_n: int = 1000
    backbone: str = "desk"
    seed: int = 0

    def validate(self) -> None:
        if self.curation_mode not in CURATION_MODES:
            raise ConfigError(
                f"curation_mode must be one of {CURATION_MODES}, got {self.curation_mode!r}"
            )
        if self.select_k < 0:
            raise ConfigError("select_k must be >= 0")
        if self.synth_n < 1:
            raise ConfigError("synth_n must be >= 1")
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigError(
                f"backbone must be one of {tuple(BACKBONE_PRESETS)}, got {self.backbone!r}"
            )
        self.corpus.validate()
        self.train.validate()
        self.gan.validate()
        self.tsne.validate()

    def to_json(self) -> dict:
        return {
            "corpus_dir": self.corpus_dir,
            "run_dir": self.run_dir,
            "corpus": self.corpus.to_json(),
            "train": self.train.to_json(),
            "gan": self.gan.to_json(),
            "tsne": self.tsne.to_json(),
            "curation_mode": self.curation_mode,
            "select_k": self.select_k,
            "select_threshold": self.select_threshold,
            "synth_n": self.synth_n,
            "backbone": self.backbone,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {
            "corpus_dir",
            "run_dir",
            "corpus",
            "train",
            "gan",
            "tsne",
            "curation_mode",
            "select_k",
            "select_threshold",
            "synth_n",
            "backbone",
            "seed",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            corpus_dir=str(obj.get("corpus_dir", "corpus")),
            run_dir=str(obj.get("run_dir", "runs/run-0")),
            corpus=CorpusSpec.from_json(obj.get("corpus", {})),
            train=TrainConfig.from_json(obj.get("train", {})),
            gan=GanConfig.from_json(obj.get("gan", {})),
            tsne=TsneConfig.from_json(obj.get("tsne", {})),
            curation_mode=str(obj.get("curation_mode", "auto_k")),
            select_k=int(obj.get("select_k", 70)),
            select_threshold=float(obj.get("select_threshold", 0.5)),
            synth_n=int(obj.get("synth_n", 1000)),
            backbone=str(obj.get("backbone", "desk")),
            seed=int(obj.get("seed", 0)),
        )
        cfg.validate()
        return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    """Split "a.b.c=value" into (["a","b","c"], parsed value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(obj: dict, overrides: Sequence[str]) -> dict:
    """Apply dotted-path overrides to a config dict (in place, returned)."""
    for text in overrides:
        path, value = parse_override(text)
        node = obj
        for part in path[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[path[-1]] = value
    return obj


def load_pipeline_config(
    path: Optional[Path | str] = None, overrides: Sequence[str] = ()
) -> PipelineConfig:
    """Read the JSON config file (or start from defaults) and apply overrides."""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    else:
        obj = {}
    apply_overrides(obj, overrides)
    return PipelineConfig.from_json(obj)


def save_pipeline_config(config: PipelineConfig, path: Path | str) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
