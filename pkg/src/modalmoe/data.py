"""Triplet dataset schema, JSONL serialization, and the synthetic generator.

A dataset is a directory of files:

    manifest.cfg        flat key=value manifest, regenerates everything
    train.jsonl         one triplet per line
    test.jsonl          clean evaluation split, never noised or augmented
    labels.json         token sequences naming categories and attributes
    descriptions.jsonl  per-item description text consumed by augmentation
    noise_ids.txt       (only when flips were injected) one triplet id per line

Every product is backed by a latent vector; images are a fixed random linear
rendering of the latent plus Gaussian noise, and titles are sampled from a
latent-conditioned topic distribution over the vocabulary. Positives reuse the
query latent with a small perturbation; negatives are resampled until their
latent cosine to the query falls below the hardness cap, so they are hard but
never duplicates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import ConfigError, DatasetManifest, flatten_config, write_flat_file


class ParseError(ValueError):
    """Raised when a dataset file cannot be parsed."""


class ValidationError(ValueError):
    """Raised when parsed content violates the schema or manifest dimensions."""


TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
MANIFEST_FILE = "manifest.cfg"
LABELS_FILE = "labels.json"
DESCRIPTIONS_FILE = "descriptions.jsonl"
NOISE_IDS_FILE = "noise_ids.txt"


# ---------------------------------------------------------------------------
# schema


@dataclass
class ProductContent:
    """One product's raw and (optionally) augmented content.

    ``image`` is a patches x features float array. ``enriched_title`` and
    ``aug_images`` are absent until the augmentation pipeline fills them in.
    """

    title: list[int]
    image: np.ndarray
    enriched_title: list[int] | None = None
    aug_images: list[np.ndarray] = field(default_factory=list)
    category_label: int | None = None
    attribute_labels: list[int] = field(default_factory=list)


@dataclass
class Triplet:
    triplet_id: str
    query: ProductContent
    positive: ProductContent
    negative: ProductContent


def _round_image(image: np.ndarray) -> list[list[float]]:
    return [[round(float(v), 6) for v in row] for row in image]


def _content_to_json(content: ProductContent, query_side: bool) -> dict:
    out: dict = {"title": list(map(int, content.title)), "image": _round_image(content.image)}
    if query_side:
        return out
    out["enriched_title"] = None if content.enriched_title is None else list(map(int, content.enriched_title))
    out["aug_images"] = [_round_image(img) for img in content.aug_images]
    out["category_label"] = content.category_label
    out["attribute_labels"] = list(map(int, content.attribute_labels))
    return out


def _content_from_json(obj: dict, where: str, query_side: bool) -> ProductContent:
    try:
        title = [int(t) for t in obj["title"]]
        image = np.asarray(obj["image"], dtype=np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: missing or malformed required field ({exc})") from exc
    if not title:
        raise ValidationError(f"{where}: empty title")
    if image.ndim != 2:
        raise ValidationError(f"{where}: image must be a 2-d patch-feature grid")
    content = ProductContent(title=title, image=image)
    if query_side:
        return content
    enriched = obj.get("enriched_title")
    if enriched is not None:
        content.enriched_title = [int(t) for t in enriched]
    content.aug_images = [np.asarray(img, dtype=np.float32) for img in obj.get("aug_images") or []]
    content.category_label = obj.get("category_label")
    content.attribute_labels = [int(a) for a in obj.get("attribute_labels") or []]
    return content


def triplet_to_json_line(triplet: Triplet) -> str:
    record = {
        "triplet_id": triplet.triplet_id,
        "query": _content_to_json(triplet.query, query_side=True),
        "positive": _content_to_json(triplet.positive, query_side=False),
        "negative": _content_to_json(triplet.negative, query_side=False),
    }
    return json.dumps(record, separators=(",", ":"))


def _validate_against_manifest(content: ProductContent, manifest: DatasetManifest, where: str) -> None:
    if content.image.shape != (manifest.patches, manifest.patch_features):
        raise ValidationError(
            f"{where}: image shape {content.image.shape} does not match manifest "
            f"({manifest.patches}, {manifest.patch_features})"
        )
    for img in content.aug_images:
        if img.shape != (manifest.patches, manifest.patch_features):
            raise ValidationError(f"{where}: augmented image shape {img.shape} mismatches manifest")
    for seq in (content.title, content.enriched_title or []):
        if len(seq) > manifest.text_len:
            raise ValidationError(f"{where}: text segment longer than text_len={manifest.text_len}")
        for tok in seq:
            if not (0 <= tok < manifest.vocab_size):
                raise ValidationError(f"{where}: token id {tok} outside vocab of {manifest.vocab_size}")


def load_triplets(path: str | Path, manifest: DatasetManifest | None = None) -> list[Triplet]:
    """Load a JSONL triplet file, validating structure (and dims when a manifest is given)."""
    triplets: list[Triplet] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                triplet_id = obj["triplet_id"]
                triplet = Triplet(
                    triplet_id=triplet_id,
                    query=_content_from_json(obj["query"], f"{path}:{lineno} query", query_side=True),
                    positive=_content_from_json(obj["positive"], f"{path}:{lineno} positive", query_side=False),
                    negative=_content_from_json(obj["negative"], f"{path}:{lineno} negative", query_side=False),
                )
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            if triplet_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate triplet id {triplet_id!r}")
            seen.add(triplet_id)
            if manifest is not None:
                for role in ("query", "positive", "negative"):
                    _validate_against_manifest(getattr(triplet, role), manifest, f"{path}:{lineno} {role}")
            triplets.append(triplet)
    return triplets


def write_triplets(path: str | Path, triplets: list[Triplet]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(triplet_to_json_line(t) + "\n")


def find_manifest(dataset_path: str | Path) -> DatasetManifest:
    """Locate manifest.cfg next to a dataset file (or inside a dataset dir)."""
    p = Path(dataset_path)
    candidate = p / MANIFEST_FILE if p.is_dir() else p.parent / MANIFEST_FILE
    if not candidate.exists():
        raise ValidationError(f"no {MANIFEST_FILE} found next to {dataset_path}")
    return DatasetManifest.load(candidate)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class LatentWorld:
    """Fixed random structure shared by every item of one synthetic dataset."""

    image_map: np.ndarray  # latent_dim x (patches * patch_features)
    topic_map: np.ndarray  # latent_dim x n_topic_tokens
    keyword_anchors: np.ndarray  # keyword_tokens x latent_dim
    category_anchors: np.ndarray  # n_categories x latent_dim
    attribute_anchors: np.ndarray  # n_attributes x latent_dim


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=-1, keepdims=True)


def build_world(manifest: DatasetManifest) -> LatentWorld:
    """The world is drawn from its own RNG stream so item sampling can't disturb it."""
    rng = np.random.default_rng(np.random.PCG64(manifest.seed))
    d = manifest.latent_dim
    n_topic = manifest.vocab_size - manifest.keyword_tokens
    return LatentWorld(
        image_map=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, manifest.patches * manifest.patch_features)),
        topic_map=rng.normal(0.0, 1.0, size=(d, n_topic)),
        keyword_anchors=_unit_rows(rng.normal(size=(manifest.keyword_tokens, d))),
        category_anchors=_unit_rows(rng.normal(size=(manifest.n_categories, d))),
        attribute_anchors=_unit_rows(rng.normal(size=(manifest.n_attributes, d))),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _sample_latent(manifest: DatasetManifest, world: LatentWorld, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=manifest.latent_dim)
    if manifest.cluster_spread is not None:
        anchor = world.category_anchors[rng.integers(manifest.n_categories)]
        z = anchor + manifest.cluster_spread * z
    return z / np.linalg.norm(z)


def sample_triplet_latents(
    manifest: DatasetManifest, world: LatentWorld, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Query latent, perturbed positive latent, and a hardness-capped negative latent."""
    z_q = _sample_latent(manifest, world, rng)
    z_p = z_q + manifest.positive_jitter * rng.normal(size=manifest.latent_dim)
    z_p /= np.linalg.norm(z_p)
    for _ in range(256):
        z_n = _sample_latent(manifest, world, rng)
        if float(z_q @ z_n) < manifest.hardness_cap:
            return z_q, z_p, z_n
    raise ConfigError("hardness_cap rejects every candidate negative; loosen it")


def item_keywords(latent: np.ndarray, manifest: DatasetManifest, world: LatentWorld) -> list[int]:
    scores = world.keyword_anchors @ latent
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[: manifest.keywords_per_item]]


def item_labels(latent: np.ndarray, manifest: DatasetManifest, world: LatentWorld) -> tuple[int, list[int]]:
    category = int(np.argmax(world.category_anchors @ latent))
    attr_scores = world.attribute_anchors @ latent
    attrs = [int(i) for i in np.flatnonzero(attr_scores > 0.3)]
    if not attrs:
        attrs = [int(np.argmax(attr_scores))]
    return category, attrs[:3]


def _render_title(latent, manifest: DatasetManifest, world: LatentWorld, rng) -> list[int]:
    probs = _softmax(manifest.topic_sharpness * (latent @ world.topic_map))
    draws = rng.choice(probs.size, size=manifest.title_len, p=probs)
    return [int(t) + manifest.keyword_tokens for t in draws]


def _render_image(latent, manifest: DatasetManifest, world: LatentWorld, rng) -> np.ndarray:
    clean = (latent @ world.image_map).reshape(manifest.patches, manifest.patch_features)
    noisy = clean + manifest.image_noise * rng.normal(size=clean.shape)
    return np.round(noisy, 6).astype(np.float32)


def _render_description(latent, manifest: DatasetManifest, world: LatentWorld, rng) -> list[int]:
    """Keyword tokens for the item plus topical filler; only augmentation reads this."""
    keywords = item_keywords(latent, manifest, world)
    filler_len = max(manifest.description_len - len(keywords), 0)
    probs = _softmax(manifest.topic_sharpness * (latent @ world.topic_map))
    filler = [int(t) + manifest.keyword_tokens for t in rng.choice(probs.size, size=filler_len, p=probs)]
    return keywords + filler


def _render_product(latent, manifest, world, rng, labeled: bool) -> ProductContent:
    content = ProductContent(
        title=_render_title(latent, manifest, world, rng),
        image=_render_image(latent, manifest, world, rng),
    )
    if labeled:
        category, attrs = item_labels(latent, manifest, world)
        content.category_label = category
        content.attribute_labels = attrs
    return content


def label_names(manifest: DatasetManifest, world: LatentWorld, name_len: int = 6) -> dict:
    """Deterministic token sequences naming each category and attribute.

    A name is the anchor's most probable topic tokens, i.e. the vocabulary a
    member item's title is most likely to draw from.
    """

    def name_for(anchor: np.ndarray) -> list[int]:
        logits = anchor @ world.topic_map
        order = np.argsort(-logits, kind="stable")[:name_len]
        return [int(t) + manifest.keyword_tokens for t in order]

    return {
        "categories": {str(i): name_for(a) for i, a in enumerate(world.category_anchors)},
        "attributes": {str(i): name_for(a) for i, a in enumerate(world.attribute_anchors)},
    }


def generate_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write a complete synthetic dataset directory; byte-identical per manifest."""
    manifest.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(manifest)

    def make_split(count: int, split: str) -> tuple[list[Triplet], list[dict]]:
        rng = np.random.default_rng(np.random.PCG64((manifest.seed, 1 if split == "train" else 2)))
        triplets, descriptions = [], []
        for i in range(count):
            z_q, z_p, z_n = sample_triplet_latents(manifest, world, rng)
            triplet = Triplet(
                triplet_id=f"{split}-{i:06d}",
                query=_render_product(z_q, manifest, world, rng, labeled=False),
                positive=_render_product(z_p, manifest, world, rng, labeled=True),
                negative=_render_product(z_n, manifest, world, rng, labeled=True),
            )
            triplets.append(triplet)
            descriptions.append(
                {
                    "triplet_id": triplet.triplet_id,
                    "positive": " ".join(f"t{t}" for t in _render_description(z_p, manifest, world, rng)),
                    "negative": " ".join(f"t{t}" for t in _render_description(z_n, manifest, world, rng)),
                }
            )
        return triplets, descriptions

    train, train_desc = make_split(manifest.train_count, "train")
    test, _ = make_split(manifest.test_count, "test")

    if manifest.noise_flip_rate is not None and manifest.noise_flip_rate > 0:
        train, flipped = flip_triplets(train, manifest.noise_flip_rate, manifest.seed)
        (out / NOISE_IDS_FILE).write_text("".join(f"{tid}\n" for tid in flipped))

    write_triplets(out / TRAIN_FILE, train)
    write_triplets(out / TEST_FILE, test)
    with open(out / DESCRIPTIONS_FILE, "w") as fh:
        for row in train_desc:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    with open(out / LABELS_FILE, "w") as fh:
        json.dump(label_names(manifest, world), fh, separators=(",", ":"), sort_keys=True)
    write_flat_file(out / MANIFEST_FILE, flatten_config(manifest))
    return out


# ---------------------------------------------------------------------------
# label noise


def flip_triplets(triplets: list[Triplet], flip_rate: float, seed: int) -> tuple[list[Triplet], list[str]]:
    """Swap positive and negative on round(flip_rate * N) triplets chosen by seed.

    Swapping the listed ids back reproduces the original records exactly.
    """
    if not (0.0 <= flip_rate <= 1.0):
        raise ValidationError("flip_rate must be in [0, 1]")
    n_flip = int(round(flip_rate * len(triplets)))
    rng = np.random.default_rng(np.random.PCG64((seed, 3)))
    chosen = sorted(rng.choice(len(triplets), size=n_flip, replace=False).tolist()) if n_flip else []
    chosen_set = set(chosen)
    flipped_ids = []
    out = []
    for i, t in enumerate(triplets):
        if i in chosen_set:
            out.append(Triplet(t.triplet_id, t.query, positive=t.negative, negative=t.positive))
            flipped_ids.append(t.triplet_id)
        else:
            out.append(t)
    return out, flipped_ids


def inject_label_noise(in_path: str | Path, out_path: str | Path, flip_rate: float, seed: int) -> Path:
    """Rewrite a triplet file with flipped pairs; sidecar lists one flipped id per line."""
    triplets = load_triplets(in_path)
    flipped, ids = flip_triplets(triplets, flip_rate, seed)
    write_triplets(out_path, flipped)
    sidecar = Path(str(out_path) + ".flipped_ids.txt")
    sidecar.write_text("".join(f"{tid}\n" for tid in ids))
    return sidecar
