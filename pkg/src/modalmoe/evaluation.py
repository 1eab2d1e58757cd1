"""Retrieval, zero-shot classification, attention export, and reporting.

The index is an exhaustive cosine scorer over unit-normalized embeddings.
Ranking ties break toward the lexicographically smaller candidate id, so
evaluation is reproducible to the byte. Classification encodes label names
as text-only representations and assigns items by cosine; attribute
prediction takes the top-r labels where r is the ground-truth cardinality.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError
from .data import ProductContent, Triplet, ValidationError
from .encoder import JointModel, ModalityComposition, sequence_layout

RETRIEVAL_TASKS = ("t2mm", "i2mm", "mm2mm", "t2i", "i2t")
_TASK_MODALITIES = {
    "t2mm": (ModalityComposition.TEXT_ONLY, ModalityComposition.MULTIMODAL),
    "i2mm": (ModalityComposition.IMAGE_ONLY, ModalityComposition.MULTIMODAL),
    "mm2mm": (ModalityComposition.MULTIMODAL, ModalityComposition.MULTIMODAL),
    "t2i": (ModalityComposition.TEXT_ONLY, ModalityComposition.IMAGE_ONLY),
    "i2t": (ModalityComposition.IMAGE_ONLY, ModalityComposition.TEXT_ONLY),
}


def embed_contents(
    model: JointModel,
    items: list[tuple[str, ProductContent]],
    modality: ModalityComposition,
    batch_size: int = 128,
) -> np.ndarray:
    """Encode items in fixed-size batches; rows follow the input order."""
    rows = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            reps, _, _, _ = model.encoder.encode_batch([(c, modality) for _, c in chunk])
            rows.append(reps.to(torch.float32).numpy())
    return np.concatenate(rows, axis=0)


@dataclass
class EmbeddingIndex:
    """Unit-norm embedding matrix keyed by sorted item ids."""

    ids: list[str]
    matrix: np.ndarray  # (N, D) float32, unit rows

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise ValidationError("index ids and matrix rows disagree")
        self.row_of = {item_id: i for i, item_id in enumerate(self.ids)}


def build_index(
    model: JointModel,
    items: list[tuple[str, ProductContent]],
    modality: ModalityComposition,
    batch_size: int = 128,
) -> EmbeddingIndex:
    """Embed every item and stack a cosine index; ids must be unique."""
    if not items:
        raise ValidationError("cannot build an index from zero items")
    ids = [item_id for item_id, _ in items]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate item ids in index input")
    for item_id, content in items:
        try:
            sequence_layout(content, modality, model.cfg)
        except ValidationError as exc:
            raise ValidationError(f"candidate {item_id!r}: {exc}") from exc
    order = sorted(range(len(items)), key=lambda i: ids[i])
    items = [items[i] for i in order]
    matrix = embed_contents(model, items, modality, batch_size)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    matrix = (matrix / norms).astype(np.float32)
    return EmbeddingIndex(ids=[item_id for item_id, _ in items], matrix=matrix)


def recall_at_k(
    query_ids: list[str],
    query_vectors: np.ndarray,
    ground_truth: dict[str, str],
    index: EmbeddingIndex,
    k: int,
) -> float:
    """Fraction of queries whose true item ranks in the top k by cosine.

    Scores are taken against unit-normalized query vectors; rank ties break
    toward the smaller candidate id (the index rows are id-sorted and the
    argsort is stable).
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(query_ids) != query_vectors.shape[0]:
        raise ValidationError("query ids and vectors disagree")
    for qid in query_ids:
        target = ground_truth.get(qid)
        if target is None or target not in index.row_of:
            raise ValidationError(f"query {qid!r} has no ground-truth item in the index")
    vectors = query_vectors / np.linalg.norm(query_vectors, axis=1, keepdims=True)
    scores = vectors.astype(np.float32) @ index.matrix.T
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = 0
    for row, qid in enumerate(query_ids):
        if index.row_of[ground_truth[qid]] in top[row]:
            hits += 1
    return hits / len(query_ids)


def retrieval_suite(
    model: JointModel,
    triplets: list[Triplet],
    tasks: tuple[str, ...] = RETRIEVAL_TASKS,
    ks: tuple[int, ...] = (1, 5, 10),
) -> dict[str, dict[int, float]]:
    """Recall@k over the five query-to-candidate directions of a test split.

    Candidates are the triplets' positives under the task's candidate
    modality; each query's ground truth is its own positive.
    """
    for task in tasks:
        if task not in _TASK_MODALITIES:
            raise ConfigError(f"unknown retrieval task {task!r}; choose from {RETRIEVAL_TASKS}")
    candidates = [(t.triplet_id, t.positive) for t in triplets]
    queries = [(t.triplet_id, t.query) for t in triplets]
    ground_truth = {t.triplet_id: t.triplet_id for t in triplets}
    results: dict[str, dict[int, float]] = {}
    index_cache: dict[ModalityComposition, EmbeddingIndex] = {}
    query_cache: dict[ModalityComposition, np.ndarray] = {}
    for task in tasks:
        q_modality, c_modality = _TASK_MODALITIES[task]
        if c_modality not in index_cache:
            index_cache[c_modality] = build_index(model, candidates, c_modality)
        if q_modality not in query_cache:
            query_cache[q_modality] = embed_contents(model, queries, q_modality)
        index = index_cache[c_modality]
        results[task] = {
            k: recall_at_k([qid for qid, _ in queries], query_cache[q_modality], ground_truth, index, k)
            for k in ks
        }
    return results


# ---------------------------------------------------------------------------
# zero-shot classification


def _macro_prf(per_label: dict[int, tuple[int, int, int]]) -> dict[str, float]:
    precisions, recalls, f1s = [], [], []
    for tp, fp, fn in per_label.values():
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    n = max(len(per_label), 1)
    return {
        "macro_precision": sum(precisions) / n,
        "macro_recall": sum(recalls) / n,
        "macro_f1": sum(f1s) / n,
    }


def classify_zero_shot(
    model: JointModel,
    items: list[ProductContent],
    label_names: dict[int, list[int]],
    multi_label: bool = False,
) -> dict[str, float]:
    """Zero-shot labeling against text-encoded label names.

    Single-label mode scores accuracy and macro precision/recall/F1 against
    ``category_label``. Multi-label mode predicts the top-r labels per item,
    r being the size of its ground-truth ``attribute_labels``; accuracy is
    the exact-set-match rate. Ties in label scores break toward the smaller
    label id.
    """
    if not items or not label_names:
        raise ValidationError("classification needs items and at least one label name")
    label_ids = sorted(label_names)
    name_contents = [
        (str(label), ProductContent(title=list(label_names[label]), image=np.zeros((1, 1), dtype=np.float32)))
        for label in label_ids
    ]
    label_matrix = embed_contents(model, name_contents, ModalityComposition.TEXT_ONLY)
    label_matrix /= np.linalg.norm(label_matrix, axis=1, keepdims=True)
    item_matrix = embed_contents(model, [(str(i), c) for i, c in enumerate(items)], ModalityComposition.MULTIMODAL)
    item_matrix /= np.linalg.norm(item_matrix, axis=1, keepdims=True)
    scores = item_matrix @ label_matrix.T

    per_label = {label: [0, 0, 0] for label in label_ids}
    correct = 0
    for row, item in enumerate(items):
        if multi_label:
            truth = set(item.attribute_labels)
            if not truth:
                raise ValidationError("multi-label item without attribute labels")
            r = len(truth)
            predicted = {label_ids[j] for j in np.argsort(-scores[row], kind="stable")[:r]}
            correct += int(predicted == truth)
        else:
            if item.category_label is None:
                raise ValidationError("single-label item without a category label")
            truth = {item.category_label}
            predicted = {label_ids[int(np.argmax(scores[row]))]}
            correct += int(predicted == truth)
        for label in label_ids:
            in_pred, in_truth = label in predicted, label in truth
            if in_pred and in_truth:
                per_label[label][0] += 1
            elif in_pred:
                per_label[label][1] += 1
            elif in_truth:
                per_label[label][2] += 1

    metrics = {"accuracy": correct / len(items)}
    metrics.update(_macro_prf({k: tuple(v) for k, v in per_label.items()}))
    return metrics


# ---------------------------------------------------------------------------
# attention heatmaps


def export_heatmap(
    model: JointModel, content: ProductContent, modality: ModalityComposition, out_prefix: str | Path
) -> tuple[Path, Path]:
    """Write the last layer's head-averaged attention as CSV and PGM.

    The CSV grid has one row per sequence position (every position feeds the
    mean-pooled output) over all input positions, with token labels on both
    axes. The PGM is the same grid scaled to 8-bit grayscale.
    """
    layout = sequence_layout(content, modality, model.cfg)
    maps = model.encoder.attention_weights(content, modality)  # (L, H, S, S)
    grid = maps[-1].mean(axis=0)  # (S, S)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    pgm_path = out_prefix.with_suffix(".pgm")

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position"] + layout.labels)
        for label, row in zip(layout.labels, grid):
            writer.writerow([label] + [f"{v:.6f}" for v in row])

    levels = np.rint(grid / grid.max() * 255).astype(int) if grid.max() > 0 else np.zeros_like(grid, dtype=int)
    lines = [f"{' '.join(str(v) for v in row)}" for row in levels]
    pgm_path.write_text("P2\n" + f"{grid.shape[1]} {grid.shape[0]}\n255\n" + "\n".join(lines) + "\n")
    return csv_path, pgm_path


# ---------------------------------------------------------------------------
# reports


def write_report(results: dict, out_dir: str | Path) -> tuple[Path, Path]:
    """Aligned text and CSV tables of one evaluation's metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt_path = out / "report.txt"
    csv_path = out / "report.csv"

    retrieval = results.get("retrieval", {})
    ks = sorted({k for task in retrieval.values() for k in task})
    buf = io.StringIO()
    buf.write(f"config_hash: {results.get('config_hash', '-')}\n")
    buf.write(f"seed:        {results.get('seed', '-')}\n")
    if "runtime_s" in results:
        buf.write(f"runtime_s:   {results['runtime_s']:.2f}\n")
    if retrieval:
        buf.write("\nretrieval (Recall@k)\n")
        header = "task".ljust(8) + "".join(f"R@{k}".rjust(10) for k in ks)
        buf.write(header + "\n")
        for task, per_k in retrieval.items():
            buf.write(task.ljust(8) + "".join(f"{per_k[k]:10.4f}" for k in ks) + "\n")
    for section in ("classification", "attributes"):
        if section in results:
            buf.write(f"\n{section}\n")
            for name, value in results[section].items():
                buf.write(f"{name.ljust(16)} {value:.4f}\n")
    txt_path.write_text(buf.getvalue())

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "name", "metric", "value"])
        for task, per_k in retrieval.items():
            for k in ks:
                writer.writerow(["retrieval", task, f"recall@{k}", f"{per_k[k]:.6f}"])
        for section in ("classification", "attributes"):
            for name, value in results.get(section, {}).items():
                writer.writerow([section, "-", name, f"{value:.6f}"])
        writer.writerow(["run", "-", "config_hash", results.get("config_hash", "-")])
        writer.writerow(["run", "-", "seed", results.get("seed", "-")])
    return txt_path, csv_path


def evaluate_checkpoint(
    model: JointModel,
    triplets: list[Triplet],
    tasks: tuple[str, ...],
    ks: tuple[int, ...],
    label_names: dict | None = None,
    config_hash: str = "-",
    seed: int | str = "-",
) -> dict:
    """Run the retrieval suite (and classification when labels exist) into one results dict."""
    started = time.perf_counter()
    results: dict = {
        "retrieval": retrieval_suite(model, triplets, tasks, ks),
        "config_hash": config_hash,
        "seed": seed,
    }
    if label_names:
        labeled = [t.positive for t in triplets if t.positive.category_label is not None]
        categories = {int(k): v for k, v in label_names.get("categories", {}).items()}
        if labeled and categories:
            results["classification"] = classify_zero_shot(model, labeled, categories, multi_label=False)
        attributed = [t.positive for t in triplets if t.positive.attribute_labels]
        attributes = {int(k): v for k, v in label_names.get("attributes", {}).items()}
        if attributed and attributes:
            results["attributes"] = classify_zero_shot(model, attributed, attributes, multi_label=True)
    results["runtime_s"] = time.perf_counter() - started
    return results
