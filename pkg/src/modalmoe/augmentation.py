"""Offline co-augmentation: textual enrichment and visual expansion.

Text is handled as whitespace token strings so the stage is unit-testable on
plain words; dataset records detokenize their integer titles to ``t<id>``
strings on the way in and retokenize on the way out. Entity extraction is a
rule stub: tokens shared by title and description, plus any title or
description token found in a keyword lexicon. The mock enrichment client
appends the missing entities to the title within the text budget.

Visual expansion is two-stage: a deterministic subject extraction that
soft-thresholds each patch toward the image's per-feature mean, then one
edit per prompt template, a small orthonormal feature rotation plus bias
keyed by the prompt's hash. Edited variants must stay close enough to the
item's title under a frozen reference encoder (cosine at or above the
threshold) to be kept; at most ``n_keep`` survivors are written. Queries are
never augmented, and the pipeline is a pure function of its inputs, clients,
config, and seed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.linalg import expm

from .config import ConfigError, DatasetManifest
from .data import (
    DESCRIPTIONS_FILE,
    ProductContent,
    Triplet,
    ValidationError,
    find_manifest,
    load_triplets,
    triplet_to_json_line,
)
from .encoder import JointModel, ModalityComposition, build_model

# Small built-in lexicon of product-ish keywords for plain-word usage;
# dataset pipelines pass their own.
DEFAULT_LEXICON = frozenset(
    {"cotton", "wool", "silk", "leather", "denim", "knit", "vintage", "waterproof", "wireless", "organic"}
)

PROMPT_TEMPLATES = (
    "studio backdrop, soft lighting",
    "outdoor scene, natural daylight",
    "close-up detail, textured surface",
)


@dataclass
class EntitySet:
    """Ordered entities with their source tags (first occurrence wins)."""

    entities: list[str]
    sources: dict[str, str] = field(default_factory=dict)


def _tokens(text: str) -> list[str]:
    cleaned = "".join(ch if ch.isalnum() or ch in "_-" else " " for ch in text.lower())
    return [t for t in cleaned.split() if t]


def extract_entities(title: str, description: str, lexicon: frozenset[str] = DEFAULT_LEXICON) -> EntitySet:
    """Rule-based entity stub: title-description overlap plus lexicon matches."""
    title_tokens = _tokens(title)
    description_tokens = _tokens(description)
    description_set = set(description_tokens)
    title_set = set(title_tokens)
    entities: list[str] = []
    sources: dict[str, str] = {}

    def add(token: str, source: str) -> None:
        if token and token not in sources:
            entities.append(token)
            sources[token] = source

    for token in title_tokens:
        if token in description_set or token in lexicon:
            add(token, "title")
    for token in description_tokens:
        if token in lexicon:
            add(token, "description")
    return EntitySet(entities=entities, sources=sources)


# ---------------------------------------------------------------------------
# clients


class EnrichmentClient(Protocol):
    """Text enrichment boundary; HTTP adapters can implement this protocol."""

    def enrich(self, title: list[str], image: np.ndarray, entities: list[str]) -> list[str]: ...


class EditClient(Protocol):
    """Visual editing boundary; HTTP adapters can implement this protocol."""

    def extract_subject(self, image: np.ndarray) -> np.ndarray: ...

    def edit(self, image: np.ndarray, title: list[str], prompt: str) -> np.ndarray: ...


class MockEnrichmentClient:
    """Appends the entities missing from the title, truncated to the text budget."""

    def __init__(self, text_budget: int):
        if text_budget < 1:
            raise ConfigError("text budget must be >= 1")
        self.text_budget = text_budget

    def enrich(self, title: list[str], image: np.ndarray, entities: list[str]) -> list[str]:
        present = set(title)
        enriched = list(title) + [e for e in entities if e not in present]
        return enriched[: self.text_budget]


class MockEditClient:
    """Deterministic stand-in for a subject extractor and prompted editor.

    Subject extraction shrinks each patch toward the per-feature mean, which
    suppresses small off-subject variation. Editing applies an orthonormal
    rotation (matrix exponential of a small skew-symmetric draw keyed by the
    prompt hash) plus a small bias, giving distinct, repeatable variants per
    prompt.
    """

    def __init__(self, shrink: float = 0.05, rotation_scale: float = 0.1, bias_scale: float = 0.02):
        self.shrink = shrink
        self.rotation_scale = rotation_scale
        self.bias_scale = bias_scale
        self._rotation_cache: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}

    def extract_subject(self, image: np.ndarray) -> np.ndarray:
        mean = image.mean(axis=0, keepdims=True)
        centered = image - mean
        shrunk = np.sign(centered) * np.maximum(np.abs(centered) - self.shrink, 0.0)
        return (mean + shrunk).astype(image.dtype)

    def _prompt_transform(self, prompt: str, n_features: int) -> tuple[np.ndarray, np.ndarray]:
        key = (prompt, n_features)
        if key not in self._rotation_cache:
            digest = hashlib.sha256(prompt.encode()).digest()
            rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
            raw = rng.normal(size=(n_features, n_features))
            skew = (raw - raw.T) / 2.0
            rotation = expm(self.rotation_scale * skew)
            bias = self.bias_scale * rng.normal(size=n_features)
            self._rotation_cache[key] = (rotation, bias)
        return self._rotation_cache[key]

    def edit(self, image: np.ndarray, title: list[str], prompt: str) -> np.ndarray:
        rotation, bias = self._prompt_transform(prompt, image.shape[1])
        return (image @ rotation.T + bias).astype(image.dtype)


# ---------------------------------------------------------------------------
# expansion and filtering


def enrich_title(
    title: list[str], image: np.ndarray, entities: EntitySet, client: EnrichmentClient
) -> list[str]:
    enriched = client.enrich(list(title), image, list(entities.entities))
    if not enriched:
        raise ValidationError("enrichment produced an empty title")
    return enriched


def expand_visual(
    image: np.ndarray, title: list[str], client: EditClient, prompts: tuple[str, ...] = PROMPT_TEMPLATES
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Subject image plus one edited variant per prompt (zero prompts allowed)."""
    subject = client.extract_subject(image)
    return subject, [client.edit(subject, title, prompt) for prompt in prompts]


class ReferenceEncoder:
    """Frozen encoder scoring image-text agreement for the similarity filter."""

    def __init__(self, model: JointModel):
        self.model = model.eval()

    @classmethod
    def fresh(cls, manifest: DatasetManifest, seed: int) -> "ReferenceEncoder":
        from .config import EncoderConfig  # local import to avoid a config<->encoder cycle in callers

        cfg = EncoderConfig(
            text_len=manifest.text_len,
            visual_tokens=manifest.patches,
            patch_features=manifest.patch_features,
            vocab_size=manifest.vocab_size,
        )
        return cls(build_model(cfg, seed=seed))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        content = ProductContent(title=[0], image=image)
        return self.model.encoder.encode(content, ModalityComposition.IMAGE_ONLY).vector

    def embed_text(self, tokens: list[int]) -> np.ndarray:
        content = ProductContent(title=list(tokens), image=np.zeros((1, 1), dtype=np.float32))
        return self.model.encoder.encode(content, ModalityComposition.TEXT_ONLY).vector


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def similarity_filter(
    variants: list[np.ndarray],
    title_tokens: list[int],
    reference: ReferenceEncoder,
    threshold: float,
) -> tuple[list[np.ndarray], list[float]]:
    """Keep variants whose image embedding stays within ``threshold`` cosine of the title."""
    text_vec = reference.embed_text(title_tokens)
    kept, scores = [], []
    for variant in variants:
        score = _cosine(reference.embed_image(variant), text_vec)
        scores.append(score)
        if score >= threshold:
            kept.append(variant)
    return kept, scores


# ---------------------------------------------------------------------------
# dataset pipeline


@dataclass(frozen=True)
class AugmentConfig:
    """Co-augmentation settings; the seed fixes the reference encoder."""

    n_keep: int = 2
    threshold: float = 0.2
    seed: int = 0
    prompts: tuple = PROMPT_TEMPLATES
    reference_checkpoint: str | None = None

    def validate(self) -> None:
        if self.n_keep < 0:
            raise ConfigError("n_keep must be >= 0")
        if not self.prompts and self.n_keep > 0:
            raise ConfigError("need at least one prompt to keep variants")


def token_strings(tokens: list[int]) -> list[str]:
    return [f"t{t}" for t in tokens]


def token_ids(strings: list[str], vocab_size: int) -> list[int]:
    ids = []
    for s in strings:
        if not s.startswith("t") or not s[1:].isdigit():
            raise ValidationError(f"cannot retokenize {s!r}")
        tid = int(s[1:])
        if tid >= vocab_size:
            raise ValidationError(f"token {s!r} outside vocabulary of {vocab_size}")
        ids.append(tid)
    return ids


def keyword_lexicon(manifest: DatasetManifest) -> frozenset[str]:
    """Lexicon for synthetic datasets: the reserved keyword token range."""
    return frozenset(f"t{i}" for i in range(manifest.keyword_tokens))


def load_descriptions(path: Path) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    if not path.exists():
        return out
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["triplet_id"]] = {"positive": row.get("positive", ""), "negative": row.get("negative", "")}
    return out


def _augment_element(
    content: ProductContent,
    description: str,
    lexicon: frozenset[str],
    manifest: DatasetManifest,
    enrich_client: EnrichmentClient,
    edit_client: EditClient,
    reference: ReferenceEncoder,
    cfg: AugmentConfig,
) -> tuple[ProductContent, dict]:
    title_strings = token_strings(content.title)
    entity_set = extract_entities(" ".join(title_strings), description, lexicon)
    enriched_strings = enrich_title(title_strings, content.image, entity_set, enrich_client)
    enriched = token_ids(enriched_strings, manifest.vocab_size)

    _, variants = expand_visual(content.image, title_strings, edit_client, cfg.prompts)
    kept, scores = similarity_filter(variants, content.title, reference, cfg.threshold)
    kept = kept[: cfg.n_keep]

    out = ProductContent(
        title=list(content.title),
        image=content.image,
        enriched_title=enriched,
        aug_images=[np.round(v.astype(np.float64), 6).astype(np.float32) for v in kept],
        category_label=content.category_label,
        attribute_labels=list(content.attribute_labels),
    )
    report = {
        "entities": entity_set.entities,
        "generated": len(variants),
        "kept": len(out.aug_images),
        "scores": [round(s, 6) for s in scores],
        "flagged_empty": len(out.aug_images) == 0,
    }
    return out, report


def co_augment_dataset(
    in_path: str | Path,
    out_path: str | Path,
    cfg: AugmentConfig,
    enrich_client: EnrichmentClient | None = None,
    edit_client: EditClient | None = None,
    reference: ReferenceEncoder | None = None,
) -> Path:
    """Augment every positive and negative of a triplet file; queries pass through.

    Writes the augmented JSONL to ``out_path`` and a per-record report next to
    it (``<out>.report.jsonl``). Reruns with identical inputs are byte-identical.
    """
    import torch

    cfg.validate()
    torch.set_num_threads(1)  # byte-stable outputs regardless of ambient threading
    in_path = Path(in_path)
    manifest = find_manifest(in_path)
    if manifest.n_aug < cfg.n_keep:
        raise ConfigError(f"config keeps {cfg.n_keep} variants but the manifest caps n_aug at {manifest.n_aug}")
    triplets = load_triplets(in_path, manifest)
    descriptions = load_descriptions(in_path.parent / DESCRIPTIONS_FILE)
    lexicon = keyword_lexicon(manifest)
    enrich_client = enrich_client or MockEnrichmentClient(text_budget=manifest.text_len)
    edit_client = edit_client or MockEditClient()
    if reference is None:
        if cfg.reference_checkpoint:
            from .training import load_model

            model, _ = load_model(cfg.reference_checkpoint)
            reference = ReferenceEncoder(model)
        else:
            reference = ReferenceEncoder.fresh(manifest, cfg.seed)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(str(out_path) + ".report.jsonl")
    with open(out_path, "w") as out_fh, open(report_path, "w") as report_fh:
        for t in triplets:
            desc = descriptions.get(t.triplet_id, {})
            positive, pos_report = _augment_element(
                t.positive, desc.get("positive", ""), lexicon, manifest, enrich_client, edit_client, reference, cfg
            )
            negative, neg_report = _augment_element(
                t.negative, desc.get("negative", ""), lexicon, manifest, enrich_client, edit_client, reference, cfg
            )
            out_fh.write(triplet_to_json_line(Triplet(t.triplet_id, t.query, positive, negative)) + "\n")
            row = {"triplet_id": t.triplet_id, "positive": pos_report, "negative": neg_report}
            report_fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return out_path
