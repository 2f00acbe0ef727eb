"""End-to-end augmentation experiment: does adding curated synthetic rare-class
images improve the rare class without hurting the rest?

One seed's pipeline: corpus -> baseline classifier -> baseline eval ->
translation GAN -> bulk synthesis -> similarity ranking against the worst
missed rare-class test image -> top-k selection -> merge -> retrain ->
augmented eval -> diagnostics (heatmap pairs for misclassified test images,
2-D feature embeddings before/after). A sweep repeats this over several seeds
and writes one summary JSON; the summary is a pure function of (config,
seeds), so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import (
    build_classifier,
    evaluate,
    extract_features,
    finetune,
    predict_proba,
    save_classifier,
)
from .config import PipelineConfig
from .curation import (
    auto_select,
    build_store,
    export_accepted,
    rank_candidates,
    save_store,
    select_by_threshold,
)
from .cyclegan import save_gan, save_history_csv, synthesize, train_cyclegan
from .dataset import DefectClass, Manifest, generate_corpus, read_image, save_manifest
from .errors import RailDefectError, StageFailure
from .gradcam import grad_cam, overlay, save_overlay_png
from .metrics import EvalReport, shelling_auc
from .tsne import (
    Embedding,
    nearest_neighbor_purity,
    save_embedding_csv,
    save_scatter_png,
    tsne_embed,
)


@dataclass
class SeedResult:
    """Metrics of one seed's baseline/augmented pair."""

    seed: int
    baseline_macro_auc: Optional[float]
    augmented_macro_auc: Optional[float]
    baseline_per_class_auc: list
    augmented_per_class_auc: list
    baseline_shelling_auc: Optional[float]
    augmented_shelling_auc: Optional[float]
    baseline_shelling_purity: float
    augmented_shelling_purity: float
    accepted_count: int

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "baseline_macro_auc": self.baseline_macro_auc,
            "augmented_macro_auc": self.augmented_macro_auc,
            "baseline_per_class_auc": self.baseline_per_class_auc,
            "augmented_per_class_auc": self.augmented_per_class_auc,
            "baseline_shelling_auc": self.baseline_shelling_auc,
            "augmented_shelling_auc": self.augmented_shelling_auc,
            "baseline_shelling_purity": self.baseline_shelling_purity,
            "augmented_shelling_purity": self.augmented_shelling_purity,
            "accepted_count": self.accepted_count,
        }


@dataclass
class ExperimentReport:
    run_dir: Path
    config: PipelineConfig
    seeds: list[int]
    results: list[SeedResult]

    def summary(self) -> dict:
        base = [r.baseline_shelling_auc for r in self.results]
        aug = [r.augmented_shelling_auc for r in self.results]
        obj = {
            "config": self.config.to_json(),
            "seeds": self.seeds,
            "per_seed": [r.to_json() for r in self.results],
        }
        if all(v is not None for v in base) and base:
            obj["median_baseline_shelling_auc"] = float(np.median(base))
            obj["median_augmented_shelling_auc"] = float(np.median(aug))
            obj["median_shelling_auc_gain"] = float(np.median(aug)) - float(np.median(base))
        return obj

    def save_summary(self, path: Path | str) -> None:
        Path(path).write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        )


def _stage(name: str, fn: Callable, *args, **kwargs):
    """Run one pipeline stage; failures halt with the stage name attached."""
    try:
        return fn(*args, **kwargs)
    except StageFailure:
        raise
    except RailDefectError as e:
        raise StageFailure(name, str(e)) from e


def _seeded(config, seed: int):
    return dataclasses.replace(config, seed=seed)


def pick_reference_image(
    model, manifest: Manifest, target: DefectClass = DefectClass.SHELLING
) -> str:
    """Id of the test image of the target class the model most misses.

    The curation reference is the defect the baseline had the least evidence
    for; ties break on id so the choice is deterministic.
    """
    records = manifest.select(split="test", label=target)
    if not records:
        raise StageFailure("rank", f"no test images of class {target.label}")
    scored = []
    for rec in sorted(records, key=lambda r: r.id):
        p = predict_proba(model, read_image(manifest.resolve(rec)))[target.value]
        scored.append((float(p), rec.id))
    scored.sort()
    return scored[0][1]


def _misclassified_ids(report: EvalReport) -> list[str]:
    out = []
    for row in report.predictions:
        if int(np.argmax(row.probs)) != row.true_label:
            out.append(row.id)
    return out


def _test_embedding(model, manifest: Manifest, config, seed: int) -> Embedding:
    records = sorted(manifest.select(split="test"), key=lambda r: r.id)
    feats = np.stack(
        [extract_features(model, read_image(manifest.resolve(r))) for r in records]
    )
    cfg = dataclasses.replace(config, seed=seed)
    n = len(records)
    max_perp = max((n - 1) / 3.0, 1.0)
    if cfg.perplexity > max_perp:
        cfg = dataclasses.replace(cfg, perplexity=max_perp)
    return tsne_embed(
        feats,
        [int(r.label) for r in records],
        cfg,
        ids=[r.id for r in records],
    )


def run_seed(config: PipelineConfig, seed: int, run_dir: Path) -> SeedResult:
    """One seed's full pipeline; writes all artifacts under run_dir."""
    run_dir.mkdir(parents=True, exist_ok=True)

    # Images live under the seed dir itself (train/, test/, later gan/), so
    # every manifest saved next to them resolves without rebasing.
    manifest = _stage("corpus", generate_corpus, config.corpus, run_dir)
    _stage("corpus", save_manifest, manifest, run_dir / "manifest_base.json")

    train_cfg = _seeded(config.train, seed)
    model = build_classifier(config.backbone, seed=seed, input_size=manifest.image_size)
    model, _ = _stage("train_baseline", finetune, model, manifest, train_cfg)
    save_classifier(model, run_dir / "clf_baseline.ckpt")

    report_base = _stage("eval_baseline", evaluate, model, manifest, "test")
    report_base.save(run_dir / "eval_baseline.json")
    report_base.save_predictions_csv(run_dir / "predictions_baseline.csv")

    gan_cfg = dataclasses.replace(
        _seeded(config.gan, seed), image_size=manifest.image_size
    )
    gan = _stage("train_gan", train_cyclegan, manifest, config=gan_cfg)
    save_gan(gan, run_dir / "gan.ckpt")
    save_history_csv(gan.history, run_dir / "gan_history.csv")

    candidates = _stage("synth", synthesize, gan, manifest, config.synth_n, seed)

    reference_id = pick_reference_image(model, manifest)
    reference = read_image(
        manifest.resolve(next(r for r in manifest.records if r.id == reference_id))
    )
    ranked = _stage("rank", rank_candidates, candidates, reference, model, manifest)
    store = build_store(ranked, reference_image_id=reference_id)

    if config.curation_mode == "threshold":
        accepted = _stage("select", select_by_threshold, store, config.select_threshold)
    else:  # auto_k; manual mode still auto-selects in headless runs
        accepted = _stage("select", auto_select, store, config.select_k)
    save_store(store, run_dir / "curation_store.json")

    augmented_manifest = _stage(
        "augment", export_accepted, store, manifest, run_dir / "manifest_augmented.json"
    )

    model_aug = build_classifier(
        config.backbone, seed=seed, input_size=manifest.image_size
    )
    model_aug, _ = _stage(
        "train_augmented", finetune, model_aug, augmented_manifest, train_cfg
    )
    save_classifier(model_aug, run_dir / "clf_augmented.ckpt")

    report_aug = _stage("eval_augmented", evaluate, model_aug, augmented_manifest, "test")
    report_aug.save(run_dir / "eval_augmented.json")
    report_aug.save_predictions_csv(run_dir / "predictions_augmented.csv")

    cam_dir = run_dir / "cam"
    cam_dir.mkdir(exist_ok=True)
    by_id = {r.id: r for r in manifest.records}
    for image_id in _misclassified_ids(report_base):
        rec = by_id[image_id]
        image = read_image(manifest.resolve(rec))
        for tag, m in (("baseline", model), ("augmented", model_aug)):
            hm = _stage("cam", grad_cam, m, image, DefectClass(rec.label), image_id)
            save_overlay_png(cam_dir / f"{image_id}_{tag}.png", overlay(hm, image))

    emb_base = _stage("tsne", _test_embedding, model, manifest, config.tsne, seed)
    emb_aug = _stage("tsne", _test_embedding, model_aug, manifest, config.tsne, seed)
    save_embedding_csv(emb_base, run_dir / "tsne_baseline.csv")
    save_embedding_csv(emb_aug, run_dir / "tsne_augmented.csv")
    save_scatter_png(emb_base, run_dir / "tsne_baseline.png", title="baseline features")
    save_scatter_png(emb_aug, run_dir / "tsne_augmented.png", title="augmented features")

    return SeedResult(
        seed=seed,
        baseline_macro_auc=report_base.macro_auc,
        augmented_macro_auc=report_aug.macro_auc,
        baseline_per_class_auc=report_base.per_class_auc,
        augmented_per_class_auc=report_aug.per_class_auc,
        baseline_shelling_auc=shelling_auc(report_base),
        augmented_shelling_auc=shelling_auc(report_aug),
        baseline_shelling_purity=nearest_neighbor_purity(
            emb_base, DefectClass.SHELLING.value
        ),
        augmented_shelling_purity=nearest_neighbor_purity(
            emb_aug, DefectClass.SHELLING.value
        ),
        accepted_count=len(accepted),
    )


def run_experiment(
    config: PipelineConfig,
    seeds: Optional[Sequence[int]] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> ExperimentReport:
    """Run the pipeline once per seed and write summary.json in the run dir."""
    config.validate()
    seed_list = list(seeds) if seeds is not None else [config.seed]
    if not seed_list:
        raise StageFailure("experiment", "need at least one seed")
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for seed in seed_list:
        if log_fn is not None:
            log_fn(f"seed {seed}: starting pipeline")
        result = run_seed(config, seed, run_dir / f"seed-{seed}")
        results.append(result)
        if log_fn is not None:
            log_fn(
                f"seed {seed}: shelling AUC"
                f" {result.baseline_shelling_auc} -> {result.augmented_shelling_auc}"
            )

    report = ExperimentReport(
        run_dir=run_dir, config=config, seeds=seed_list, results=results
    )
    report.save_summary(run_dir / "summary.json")
    return report
