import numpy as np
import pytest
import torch

from raildefect.classifier import TrainConfig, build_classifier, finetune
from raildefect.cyclegan import GanConfig, train_cyclegan
from raildefect.dataset import CorpusSpec, generate_corpus

torch.set_num_threads(1)


TINY_SPEC = CorpusSpec(
    image_size=32,
    train_counts=(12, 6, 6, 4),
    test_counts=(6, 3, 3, 2),
    seed=7,
)

MICRO_GAN_CONFIG = GanConfig(
    epochs=30,
    batch_size=4,
    pool_size=8,
    seed=5,
    base_channels=8,
    n_res_blocks=1,
    image_size=32,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifest = generate_corpus(TINY_SPEC, out)
    return manifest


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """A briefly trained small model over the tiny corpus."""
    model = build_classifier("micro", seed=3, input_size=32)
    config = TrainConfig(learning_rate=0.05, epochs=4, batch_size=8, seed=3)
    model, _ = finetune(model, tiny_corpus, config)
    return model


@pytest.fixture(scope="session")
def gan_corpus(tmp_path_factory):
    """16 images in each translation domain at 32x32."""
    spec = CorpusSpec(
        image_size=32,
        train_counts=(16, 1, 1, 16),
        test_counts=(1, 1, 1, 1),
        seed=11,
    )
    out = tmp_path_factory.mktemp("gan_corpus")
    return generate_corpus(spec, out)


@pytest.fixture(scope="session")
def micro_gan(gan_corpus):
    """A seeded 30-epoch translation run on the 16-per-domain corpus."""
    return train_cyclegan(gan_corpus, config=MICRO_GAN_CONFIG)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
