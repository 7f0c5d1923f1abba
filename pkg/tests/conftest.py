"""Shared fixtures: a small paired dataset with one time-resolved and one
static modality, plus a desk-scale model built on it."""

import pytest

from neuroalign import (AlignmentModel, ModalityKind, SyntheticSpec,
                        generate_synthetic, split_zero_shot)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 concepts x 2 images, 2 modalities, 2 subjects, zero-shot split."""
    spec = SyntheticSpec(
        n_concepts=12,
        images_per_concept=2,
        subjects_per_modality=2,
        modalities=[ModalityKind("eeg", 4, 16), ModalityKind("fmri", 10)],
        noise_sigma=0.1,
        seed=1,
        embedding_dim=8,
    )
    return split_zero_shot(generate_synthetic(spec), 0.25, seed=0)


@pytest.fixture()
def tiny_model(tiny_dataset):
    """Small model matching the tiny dataset; fresh per test."""
    return AlignmentModel.from_dataset(
        tiny_dataset, model_dim=16, n_experts=2, seed=0,
        encoder_overrides={"in_channels": 4, "mlp_hidden": 32, "conv_tokens": 4},
    )
