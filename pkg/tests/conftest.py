"""Shared fixtures: small generated datasets and a briefly trained model.

Session-scoped so the expensive pieces (dataset generation, a short training
run) happen once per pytest invocation.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from modalmoe.config import DatasetManifest, TrainConfig
from modalmoe.data import generate_dataset, load_triplets
from modalmoe.training import load_model, train

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_manifest():
    return DatasetManifest(seed=7, train_count=60, test_count=12)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(tiny_manifest, out)
    return out


@pytest.fixture(scope="session")
def tiny_triplets(tiny_dataset, tiny_manifest):
    return load_triplets(tiny_dataset / "train.jsonl", tiny_manifest)


@pytest.fixture(scope="session")
def clustered_dataset(tmp_path_factory):
    """Category-clustered latents so zero-shot classification has signal."""
    out = tmp_path_factory.mktemp("clustered_ds")
    manifest = DatasetManifest(seed=3, train_count=1500, test_count=200, cluster_spread=0.25)
    generate_dataset(manifest, out)
    return out


@pytest.fixture(scope="session")
def trained_model(clustered_dataset, tmp_path_factory):
    """A briefly trained joint model plus its test split and label names."""
    out_dir = tmp_path_factory.mktemp("trained")
    cfg = TrainConfig(
        dataset=str(clustered_dataset),
        out_dir=str(out_dir),
        mode="joint",
        seed=0,
        steps=300,
        batch_size=16,
        learning_rate=3e-4,
        log_every=50,
    )
    result = train(cfg)
    model, _ = load_model(result.checkpoint_path)
    manifest = DatasetManifest.load(clustered_dataset / "manifest.cfg")
    test = load_triplets(clustered_dataset / "test.jsonl", manifest)
    labels = json.loads((clustered_dataset / "labels.json").read_text())
    return model, test, labels


def assert_triplets_equal(a, b):
    """Structural equality of triplet lists, independent of the serializer."""
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.triplet_id == y.triplet_id
        for role in ("query", "positive", "negative"):
            cx, cy = getattr(x, role), getattr(y, role)
            assert cx.title == cy.title
            np.testing.assert_array_equal(cx.image, cy.image)
            assert cx.enriched_title == cy.enriched_title
            assert len(cx.aug_images) == len(cy.aug_images)
            for ix, iy in zip(cx.aug_images, cy.aug_images):
                np.testing.assert_array_equal(ix, iy)
            assert cx.category_label == cy.category_label
            assert cx.attribute_labels == cy.attribute_labels
