import json

import numpy as np
import pytest

from modalmoe.config import ConfigError, DatasetManifest
from modalmoe.data import ValidationError, load_triplets
from modalmoe.augmentation import (
    AugmentConfig,
    DEFAULT_LEXICON,
    MockEditClient,
    MockEnrichmentClient,
    PROMPT_TEMPLATES,
    ReferenceEncoder,
    co_augment_dataset,
    enrich_title,
    expand_visual,
    extract_entities,
    keyword_lexicon,
    load_descriptions,
    similarity_filter,
    token_ids,
    token_strings,
)


# ---------------------------------------------------------------------------
# entity extraction


def test_entities_from_title_description_overlap():
    got = extract_entities("knit cardigan soft", "a knit cardigan for winter")
    assert got.entities == ["knit", "cardigan"]
    assert got.sources == {"knit": "title", "cardigan": "title"}


def test_entities_lexicon_only_from_description():
    got = extract_entities("plain tee", "a waterproof shell")
    assert got.entities == ["waterproof"]
    assert got.sources["waterproof"] == "description"


def test_entities_first_occurrence_wins():
    got = extract_entities("wool wool hat", "hat of wool")
    assert got.entities == ["wool", "hat"]
    assert got.sources["wool"] == "title"


def test_entities_normalize_case_and_punctuation():
    got = extract_entities("Knit, Cardigan!", "KNIT cardigan.")
    assert got.entities == ["knit", "cardigan"]


def test_entities_empty_inputs():
    assert extract_entities("", "").entities == []
    assert extract_entities("abc", "xyz").entities == []


def test_custom_lexicon_replaces_default():
    got = extract_entities("quartz dial", "", lexicon=frozenset({"quartz"}))
    assert got.entities == ["quartz"]
    assert "quartz" not in DEFAULT_LEXICON


# ---------------------------------------------------------------------------
# mock clients


def test_enrichment_appends_missing_entities():
    client = MockEnrichmentClient(text_budget=16)
    out = client.enrich(["cardigan"], np.zeros((1, 1)), ["knit", "cardigan", "teddybear"])
    assert out == ["cardigan", "knit", "teddybear"]


def test_enrichment_is_noop_when_nothing_missing():
    client = MockEnrichmentClient(text_budget=16)
    assert client.enrich(["a", "b"], np.zeros((1, 1)), ["b", "a"]) == ["a", "b"]


def test_enrichment_respects_budget():
    client = MockEnrichmentClient(text_budget=2)
    assert client.enrich(["cardigan"], np.zeros((1, 1)), ["knit", "wool"]) == ["cardigan", "knit"]


def test_enrichment_budget_validation():
    with pytest.raises(ConfigError, match="budget"):
        MockEnrichmentClient(text_budget=0)


def test_enrich_title_rejects_empty_result():
    class EmptyClient:
        def enrich(self, title, image, entities):
            return []

    with pytest.raises(ValidationError, match="empty title"):
        enrich_title(["a"], np.zeros((1, 1)), extract_entities("", ""), EmptyClient())


def test_subject_extraction_shrinks_toward_feature_mean():
    client = MockEditClient(shrink=0.05)
    rng = np.random.default_rng(0)
    image = rng.normal(size=(4, 8)).astype(np.float32)
    subject = client.extract_subject(image)
    assert subject.shape == image.shape
    assert subject.dtype == image.dtype
    mean = image.mean(axis=0, keepdims=True)
    assert np.all(np.abs(subject - mean) <= np.abs(image - mean) + 1e-6)
    # Large deviations shrink by exactly the soft threshold.
    big = np.abs(image - mean) > 0.5
    np.testing.assert_allclose(
        np.abs(subject - mean)[big], (np.abs(image - mean) - 0.05)[big], atol=1e-6
    )


def test_edits_are_deterministic_and_prompt_distinct():
    client = MockEditClient()
    rng = np.random.default_rng(1)
    image = rng.normal(size=(4, 8)).astype(np.float32)
    a1 = client.edit(image, ["t1"], "studio")
    a2 = client.edit(image, ["t1"], "studio")
    b = client.edit(image, ["t1"], "outdoor")
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)
    # A fresh client (empty transform cache) reproduces the same edit.
    np.testing.assert_array_equal(MockEditClient().edit(image, ["t1"], "studio"), a1)


def test_edit_rotation_roughly_preserves_row_norms():
    client = MockEditClient(bias_scale=0.0)
    rng = np.random.default_rng(2)
    image = rng.normal(size=(4, 8)).astype(np.float32)
    edited = client.edit(image, [], "any prompt")
    np.testing.assert_allclose(
        np.linalg.norm(edited, axis=1), np.linalg.norm(image, axis=1), rtol=1e-4
    )


def test_expand_visual_counts_and_determinism():
    client = MockEditClient()
    rng = np.random.default_rng(3)
    image = rng.normal(size=(4, 8)).astype(np.float32)
    subject, variants = expand_visual(image, ["t1"], client)
    assert subject.shape == image.shape
    assert len(variants) == len(PROMPT_TEMPLATES)
    for i, a in enumerate(variants):
        for b in variants[i + 1 :]:
            assert not np.allclose(a, b)
    _, again = expand_visual(image, ["t1"], MockEditClient())
    for a, b in zip(variants, again):
        np.testing.assert_array_equal(a, b)


def test_expand_visual_zero_prompts():
    image = np.zeros((2, 4), dtype=np.float32)
    subject, variants = expand_visual(image, [], MockEditClient(), prompts=())
    assert variants == []
    assert subject.shape == image.shape


# ---------------------------------------------------------------------------
# similarity filtering


class _FakeReference:
    """Duck-typed reference whose image score is the variant's [0, 0] entry."""

    def embed_text(self, tokens):
        return np.array([1.0, 0.0, 0.0])

    def embed_image(self, image):
        x = float(image[0, 0])
        return np.array([x, np.sqrt(max(1.0 - x * x, 0.0)), 0.0])


def _variant(score):
    img = np.zeros((2, 3), dtype=np.float32)
    img[0, 0] = score
    return img


def test_similarity_filter_keeps_scores_above_threshold():
    variants = [_variant(0.3), _variant(0.7)]
    kept, scores = similarity_filter(variants, [1], _FakeReference(), threshold=0.5)
    np.testing.assert_allclose(scores, [0.3, 0.7], atol=1e-6)
    assert len(kept) == 1
    np.testing.assert_array_equal(kept[0], variants[1])


def test_similarity_filter_boundary_is_inclusive():
    kept, _ = similarity_filter([_variant(0.5)], [1], _FakeReference(), threshold=0.5)
    assert len(kept) == 1


def test_similarity_filter_extreme_thresholds():
    variants = [_variant(0.2), _variant(0.9)]
    all_kept, _ = similarity_filter(variants, [1], _FakeReference(), threshold=-1.0)
    assert len(all_kept) == 2
    none_kept, scores = similarity_filter(variants, [1], _FakeReference(), threshold=0.99)
    assert none_kept == []
    assert len(scores) == 2


def test_reference_encoder_fresh_is_seed_deterministic():
    manifest = DatasetManifest(seed=0, train_count=1, test_count=1)
    a = ReferenceEncoder.fresh(manifest, seed=5)
    b = ReferenceEncoder.fresh(manifest, seed=5)
    rng = np.random.default_rng(4)
    image = rng.normal(size=(manifest.patches, manifest.patch_features)).astype(np.float32)
    np.testing.assert_array_equal(a.embed_image(image), b.embed_image(image))
    np.testing.assert_array_equal(a.embed_text([3, 7]), b.embed_text([3, 7]))
    assert np.linalg.norm(a.embed_image(image)) == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------------------
# tokens and config


def test_token_round_trip():
    assert token_ids(token_strings([5, 10, 0]), vocab_size=512) == [5, 10, 0]


@pytest.mark.parametrize("bad", ["x5", "t", "5", "t-1"])
def test_token_ids_rejects_malformed(bad):
    with pytest.raises(ValidationError, match="retokenize"):
        token_ids([bad], vocab_size=512)


def test_token_ids_rejects_out_of_vocab():
    with pytest.raises(ValidationError, match="outside vocabulary"):
        token_ids(["t512"], vocab_size=512)


def test_keyword_lexicon_matches_manifest():
    manifest = DatasetManifest(seed=0, train_count=1, test_count=1)
    lex = keyword_lexicon(manifest)
    assert len(lex) == manifest.keyword_tokens
    assert "t0" in lex and f"t{manifest.keyword_tokens - 1}" in lex
    assert f"t{manifest.keyword_tokens}" not in lex


def test_load_descriptions_missing_file(tmp_path):
    assert load_descriptions(tmp_path / "nope.jsonl") == {}


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(n_keep=-1).validate()
    with pytest.raises(ConfigError):
        AugmentConfig(n_keep=1, prompts=()).validate()
    AugmentConfig(n_keep=0, prompts=()).validate()  # nothing kept, nothing needed


# ---------------------------------------------------------------------------
# whole-file pipeline


@pytest.fixture(scope="module")
def augmented(tiny_dataset, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("aug")
    out = out_dir / "train.jsonl"
    co_augment_dataset(tiny_dataset / "train.jsonl", out, AugmentConfig())
    return out


def test_co_augmentation_is_byte_identical(tiny_dataset, augmented, tmp_path):
    again = tmp_path / "again.jsonl"
    co_augment_dataset(tiny_dataset / "train.jsonl", again, AugmentConfig())
    assert again.read_bytes() == augmented.read_bytes()
    report_a = str(augmented) + ".report.jsonl"
    report_b = str(again) + ".report.jsonl"
    assert open(report_b, "rb").read() == open(report_a, "rb").read()


def test_co_augmentation_creates_parent_dirs(tiny_dataset, augmented, tmp_path):
    out = tmp_path / "nested" / "train.jsonl"
    co_augment_dataset(tiny_dataset / "train.jsonl", out, AugmentConfig())
    assert out.read_bytes() == augmented.read_bytes()


def test_co_augmentation_preserves_queries_and_images(tiny_dataset, tiny_manifest, augmented, tiny_triplets):
    out = load_triplets(augmented, tiny_manifest)
    assert [t.triplet_id for t in out] == [t.triplet_id for t in tiny_triplets]
    for before, after in zip(tiny_triplets, out):
        assert after.query.title == before.query.title
        np.testing.assert_array_equal(after.query.image, before.query.image)
        assert after.query.enriched_title is None
        np.testing.assert_array_equal(after.positive.image, before.positive.image)
        assert after.positive.category_label == before.positive.category_label


def test_co_augmentation_output_invariants(tiny_manifest, augmented):
    cfg = AugmentConfig()
    out = load_triplets(augmented, tiny_manifest)
    grew = 0
    for t in out:
        for element in (t.positive, t.negative):
            assert element.enriched_title is not None
            assert len(element.enriched_title) <= tiny_manifest.text_len
            assert len(element.aug_images) <= cfg.n_keep
            if len(element.enriched_title) > len(element.title):
                grew += 1
    assert grew > 0  # enrichment added at least some entities somewhere


def test_co_augmentation_report_invariants(augmented):
    rows = [json.loads(line) for line in open(str(augmented) + ".report.jsonl")]
    assert rows
    for row in rows:
        for side in ("positive", "negative"):
            rep = row[side]
            assert rep["generated"] == len(PROMPT_TEMPLATES)
            assert len(rep["scores"]) == rep["generated"]
            assert 0 <= rep["kept"] <= min(rep["generated"], 2)
            assert rep["flagged_empty"] == (rep["kept"] == 0)
    # The pinned threshold should keep at least one variant for most records.
    kept_any = sum(1 for row in rows if row["positive"]["kept"] > 0)
    assert kept_any / len(rows) > 0.5


def test_co_augmentation_rejects_overfull_n_keep(tiny_dataset, tmp_path):
    with pytest.raises(ConfigError, match="n_aug"):
        co_augment_dataset(tiny_dataset / "train.jsonl", tmp_path / "x.jsonl", AugmentConfig(n_keep=3))
