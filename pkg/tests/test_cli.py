"""Command-line surface: each subcommand end to end on a micro config, plus
the exit-code contract (0 ok, 2 config error, 3 stage failure)."""

import json

import pytest

from raildefect.cli import main
from raildefect.dataset import load_manifest

MICRO_OVERRIDES = [
    "--set", "corpus.image_size=32",
    "--set", "corpus.train_counts=[10,3,3,3]",
    "--set", "corpus.test_counts=[3,2,2,2]",
    "--set", "corpus.seed=19",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=8",
    "--set", "gan.epochs=1",
    "--set", "gan.steps_per_epoch=2",
    "--set", "gan.batch_size=2",
    "--set", "gan.pool_size=4",
    "--set", "gan.base_channels=2",
    "--set", "gan.n_res_blocks=1",
    "--set", "gan.image_size=32",
    "--set", "tsne.iterations=20",
    "--set", "synth_n=5",
    "--set", "select_k=2",
    "--set", "backbone=micro",
]


# Oracle: expected corpus image count straight from the count lists above.
def corpus_size_oracle():
    return sum([10, 3, 3, 3]) + sum([3, 2, 2, 2])


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Corpus, trained classifier, trained GAN shared by the subcommand tests."""
    ws = tmp_path_factory.mktemp("cli")
    corpus = ws / "corpus"
    assert main(["corpus", *MICRO_OVERRIDES, "--out", str(corpus)]) == 0
    assert (
        main(
            [
                "train-clf",
                *MICRO_OVERRIDES,
                "--manifest", str(corpus / "manifest.json"),
                "--out", str(ws / "model.ckpt"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train-gan",
                *MICRO_OVERRIDES,
                "--manifest", str(corpus / "manifest.json"),
                "--out", str(ws / "gan.ckpt"),
                "--history", str(ws / "gan_history.csv"),
            ]
        )
        == 0
    )
    return ws


class TestPipelineSubcommands:
    def test_corpus_wrote_manifest_and_images(self, cli_workspace):
        manifest = load_manifest(cli_workspace / "corpus" / "manifest.json")
        assert len(manifest.records) == corpus_size_oracle()

    def test_gan_history_has_loss_columns(self, cli_workspace):
        header = (cli_workspace / "gan_history.csv").read_text().splitlines()[0]
        assert header.split(",") == [
            "step",
            "loss_D_A",
            "loss_D_B",
            "loss_G_adv",
            "loss_cycle",
            "loss_identity",
            "loss_G_total",
        ]

    def test_eval_writes_report_and_csv(self, cli_workspace, tmp_path):
        out = tmp_path / "eval.json"
        code = main(
            [
                "eval",
                "--manifest", str(cli_workspace / "corpus" / "manifest.json"),
                "--model", str(cli_workspace / "model.ckpt"),
                "--out", str(out),
            ]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert len(report["per_class_auc"]) == 4
        assert out.with_suffix(".csv").is_file()

    def test_synth_rank_select_augment_chain(self, cli_workspace, tmp_path):
        corpus = cli_workspace / "corpus"
        cands = tmp_path / "cands.json"
        store = tmp_path / "store.json"
        out_manifest = tmp_path / "aug.json"
        assert (
            main(
                [
                    "synth",
                    *MICRO_OVERRIDES,
                    "--manifest", str(corpus / "manifest.json"),
                    "--gan", str(cli_workspace / "gan.ckpt"),
                    "--n", "5",
                    "--out", str(cands),
                ]
            )
            == 0
        )
        assert len(json.loads(cands.read_text())) == 5
        assert (
            main(
                [
                    "rank",
                    "--manifest", str(corpus / "manifest.json"),
                    "--model", str(cli_workspace / "model.ckpt"),
                    "--candidates", str(cands),
                    "--reference", "test-shelling-0000",
                    "--out", str(store),
                ]
            )
            == 0
        )
        assert main(["select", "--store", str(store), "--k", "2"]) == 0
        assert (
            main(
                [
                    "augment",
                    "--store", str(store),
                    "--manifest", str(corpus / "manifest.json"),
                    "--out", str(out_manifest),
                ]
            )
            == 0
        )
        base = load_manifest(corpus / "manifest.json")
        # the augmented manifest resolves images against the corpus layout
        aug = load_manifest(out_manifest, check_files=False)
        assert len(aug.records) == len(base.records) + 2

    def test_cam_writes_overlay(self, cli_workspace, tmp_path):
        out = tmp_path / "cam.png"
        code = main(
            [
                "cam",
                "--manifest", str(cli_workspace / "corpus" / "manifest.json"),
                "--model", str(cli_workspace / "model.ckpt"),
                "--image-id", "test-shelling-0001",
                "--target", "3",
                "--out", str(out),
            ]
        )
        assert code == 0
        assert out.read_bytes().startswith(b"\x89PNG")

    def test_tsne_writes_csv_and_png(self, cli_workspace, tmp_path):
        out = tmp_path / "emb.csv"
        code = main(
            [
                "tsne",
                *MICRO_OVERRIDES,
                "--manifest", str(cli_workspace / "corpus" / "manifest.json"),
                "--model", str(cli_workspace / "model.ckpt"),
                "--out", str(out),
            ]
        )
        assert code == 0
        assert out.read_text().splitlines()[0] == "id,x,y,label"
        assert out.with_suffix(".png").is_file()

    def test_experiment_subcommand_writes_summary(self, tmp_path):
        run_dir = tmp_path / "run"
        code = main(
            [
                "experiment",
                *MICRO_OVERRIDES,
                "--run-dir", str(run_dir),
                "--seeds", "0",
            ]
        )
        assert code == 0
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["seeds"] == [0]


class TestExitCodes:
    def test_missing_config_file_is_2(self, tmp_path):
        code = main(
            ["corpus", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "c")]
        )
        assert code == 2

    def test_unknown_config_key_is_2(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"sele_k": 3}))
        code = main(["corpus", "--config", str(path), "--out", str(tmp_path / "c")])
        assert code == 2

    def test_bad_override_value_is_2(self, tmp_path):
        code = main(
            ["corpus", "--set", "curation_mode=oops", "--out", str(tmp_path / "c")]
        )
        assert code == 2

    def test_missing_manifest_is_2(self, tmp_path):
        code = main(
            [
                "eval",
                "--manifest", str(tmp_path / "none.json"),
                "--model", str(tmp_path / "none.ckpt"),
                "--out", str(tmp_path / "e.json"),
            ]
        )
        assert code == 2

    def test_unknown_reference_id_is_2(self, cli_workspace, tmp_path):
        corpus = cli_workspace / "corpus"
        cands = tmp_path / "cands.json"
        main(
            [
                "synth",
                *MICRO_OVERRIDES,
                "--manifest", str(corpus / "manifest.json"),
                "--gan", str(cli_workspace / "gan.ckpt"),
                "--n", "2",
                "--out", str(cands),
            ]
        )
        code = main(
            [
                "rank",
                "--manifest", str(corpus / "manifest.json"),
                "--model", str(cli_workspace / "model.ckpt"),
                "--candidates", str(cands),
                "--reference", "ghost",
                "--out", str(tmp_path / "s.json"),
            ]
        )
        assert code == 2

    def test_stage_failure_is_3(self, tmp_path):
        # a corpus with no rare-class test images fails the experiment's
        # ranking stage after training succeeds
        code = main(
            [
                "experiment",
                *MICRO_OVERRIDES,
                "--set", "corpus.test_counts=[3,2,2,0]",
                "--run-dir", str(tmp_path / "run"),
                "--seeds", "0",
            ]
        )
        assert code == 3

    def test_wrong_checkpoint_kind_is_3(self, cli_workspace, tmp_path):
        code = main(
            [
                "eval",
                "--manifest", str(cli_workspace / "corpus" / "manifest.json"),
                "--model", str(cli_workspace / "gan.ckpt"),
                "--out", str(tmp_path / "e.json"),
            ]
        )
        assert code == 3
