"""Rail-surface defect detection with GAN-augmented training data.

Pipeline: procedural corpus -> fine-tuned CNN classifier -> CycleGAN
normal-to-shelling synthesis -> similarity-ranked curation -> retraining ->
Grad-CAM / t-SNE diagnostics.
"""

__version__ = "0.1.0"

from .dataset import (  # noqa: F401
    CorpusSpec,
    DefectClass,
    ImageRecord,
    Manifest,
    generate_corpus,
    load_manifest,
    merge_augmented,
    save_manifest,
)
