"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 2 configuration problem, 3 stage failure. Every
subcommand takes --config (JSON file) plus repeatable --set dotted-path
overrides; --seed and --run-dir are shorthands for the matching keys.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .classifier import (
    build_classifier,
    evaluate,
    finetune,
    load_classifier,
    save_classifier,
)
from .config import PipelineConfig, load_pipeline_config
from .curation import (
    auto_select,
    build_store,
    export_accepted,
    load_store,
    rank_candidates,
    save_store,
    select_by_threshold,
)
from .cyclegan import load_gan, save_gan, save_history_csv, synthesize, train_cyclegan
from .dataset import (
    DefectClass,
    ImageRecord,
    generate_corpus,
    load_manifest,
    read_image,
    save_manifest,
)
from .errors import ConfigError, ManifestError, RailDefectError, StageFailure
from .experiment import run_experiment
from .gradcam import grad_cam, overlay, save_overlay_png
from .tsne import save_embedding_csv, save_scatter_png

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override, repeatable",
    )
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--run-dir", type=Path, default=None, help="run dir override")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.run_dir is not None:
        overrides.append(f"run_dir={json.dumps(str(args.run_dir))}")
    return load_pipeline_config(args.config, overrides)


def _load_candidates(path: Path) -> list[ImageRecord]:
    obj = json.loads(path.read_text())
    if not isinstance(obj, list):
        raise ManifestError(f"{path} must hold a JSON list of records")
    return [ImageRecord.from_json(item) for item in obj]


def _save_candidates(records: list[ImageRecord], path: Path) -> None:
    path.write_text(
        json.dumps([r.to_json() for r in records], indent=2, sort_keys=True) + "\n"
    )


def cmd_corpus(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    manifest = generate_corpus(config.corpus, out)
    save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(manifest.records)} images under {out}")
    return EXIT_OK


def cmd_train_clf(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    train_cfg = config.train
    if args.seed is not None:
        train_cfg.seed = args.seed
    model = build_classifier(
        config.backbone, seed=train_cfg.seed, input_size=manifest.image_size
    )
    model, history = finetune(model, manifest, train_cfg)
    save_classifier(model, args.out)
    print(f"trained {config.backbone} for {train_cfg.epochs} epochs -> {args.out}")
    if history:
        print(f"final epoch mean loss {history[-1]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_classifier(args.model)
    report = evaluate(model, manifest, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    report.save_predictions_csv(out.with_suffix(".csv"))
    macro = "undefined" if report.macro_auc is None else f"{report.macro_auc:.4f}"
    print(f"macro AUC {macro} -> {out}")
    return EXIT_OK


def cmd_train_gan(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    gan_cfg = config.gan
    if args.seed is not None:
        gan_cfg.seed = args.seed
    gan_cfg.image_size = manifest.image_size
    ckpt = train_cyclegan(manifest, config=gan_cfg, log_fn=print)
    save_gan(ckpt, args.out)
    if args.history is not None:
        save_history_csv(ckpt.history, args.history)
    print(f"trained {gan_cfg.epochs} epochs -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    ckpt = load_gan(args.gan)
    records = synthesize(ckpt, manifest, n=args.n or config.synth_n, seed=config.seed)
    _save_candidates(records, Path(args.out))
    print(f"synthesized {len(records)} candidates -> {args.out}")
    return EXIT_OK


def cmd_rank(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_classifier(args.model)
    candidates = _load_candidates(Path(args.candidates))
    ref = next((r for r in manifest.records if r.id == args.reference), None)
    if ref is None:
        raise ConfigError(f"reference image id {args.reference!r} not in manifest")
    ranked = rank_candidates(candidates, read_image(manifest.resolve(ref)), model, manifest)
    store = build_store(ranked, reference_image_id=args.reference)
    save_store(store, args.out)
    print(f"ranked {len(ranked)} candidates -> {args.out}")
    return EXIT_OK


def cmd_select(args) -> int:
    store = load_store(args.store)
    if args.threshold is not None:
        chosen = select_by_threshold(store, args.threshold)
    else:
        if args.k is None:
            raise ConfigError("need --k or --threshold")
        chosen = auto_select(store, args.k)
    save_store(store, args.store)
    print(f"accepted {len(chosen)} candidates")
    return EXIT_OK


def cmd_augment(args) -> int:
    store = load_store(args.store)
    manifest = load_manifest(args.manifest)
    augmented = export_accepted(store, manifest, out_path=args.out)
    added = augmented.count("train", DefectClass.SHELLING) - manifest.count(
        "train", DefectClass.SHELLING
    )
    print(f"augmented manifest with {added} records -> {args.out}")
    return EXIT_OK


def cmd_cam(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_classifier(args.model)
    rec = next((r for r in manifest.records if r.id == args.image_id), None)
    if rec is None:
        raise ConfigError(f"image id {args.image_id!r} not in manifest")
    cls = DefectClass(args.target) if args.target is not None else DefectClass(rec.label)
    image = read_image(manifest.resolve(rec))
    hm = grad_cam(model, image, cls, image_id=args.image_id)
    save_overlay_png(args.out, overlay(hm, image))
    print(f"heatmap for {args.image_id} (class {cls.label}) -> {args.out}")
    return EXIT_OK


def cmd_tsne(args) -> int:
    from .experiment import _test_embedding

    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    model = load_classifier(args.model)
    emb = _test_embedding(model, manifest, config.tsne, config.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embedding_csv(emb, out)
    save_scatter_png(emb, out.with_suffix(".png"))
    print(f"embedded {len(emb.ids)} test images -> {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(Path(args.project), static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    report = run_experiment(config, seeds=seeds, log_fn=print)
    summary = report.summary()
    if "median_shelling_auc_gain" in summary:
        print(
            "median shelling AUC"
            f" {summary['median_baseline_shelling_auc']:.4f}"
            f" -> {summary['median_augmented_shelling_auc']:.4f}"
        )
    print(f"summary -> {report.run_dir / 'summary.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raildefect",
        description="rail-surface defect pipeline: corpus, training, synthesis, curation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="render the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("train-clf", help="finetune the classifier")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_train_clf)

    p = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train-gan", help="train the two-domain translation GAN")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--history", type=Path, default=None, help="loss CSV path")
    p.set_defaults(fn=cmd_train_gan)

    p = sub.add_parser("synth", help="generate candidate defect images")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--gan", type=Path, required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="candidate records JSON")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("rank", help="rank candidates against a reference image")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--reference", required=True, help="reference image id")
    p.add_argument("--out", type=Path, required=True, help="curation store JSON")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("select", help="accept top candidates in a store")
    _add_common(p)
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("augment", help="merge accepted candidates into a manifest")
    _add_common(p)
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("cam", help="write a class-evidence heatmap overlay")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--target", type=int, default=None, choices=(0, 1, 2, 3))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_cam)

    p = sub.add_parser("tsne", help="embed test-split features in 2-D")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="embedding CSV path")
    p.set_defaults(fn=cmd_tsne)

    p = sub.add_parser("serve", help="start the curation HTTP service")
    _add_common(p)
    p.add_argument("--project", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--static", type=Path, default=None, help="UI asset dir")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("experiment", help="run the full augmentation experiment")
    _add_common(p)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(fn=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as e:
        print(f"{e}", file=sys.stderr)
        return EXIT_STAGE
    except RailDefectError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
