"""Alignment objectives, the reliability filter, and total-loss composition.

Inter-product losses contrast a query representation against its paired
positive, with the triplet's mined hard negative plus the other in-batch
positives as distractors. Intra-product losses anchor an item's image-only
representation to its own text, against the opposite item's text and the
other in-batch texts of the same role. Per-triplet reliability weights
(sigmoid of the similarity margin minus a decaying offset) multiply the
inter contributions only; weights at or above the confidence threshold snap
to one so confident pairs train at full strength.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .config import ConfigError, FilterSchedule
from .moe import INTER_OBJECTIVES, INTRA_OBJECTIVES, AlignmentObjective


class NumericsError(RuntimeError):
    """Raised when a loss term stops being finite."""


# ---------------------------------------------------------------------------
# single-pair losses


def _contrastive(anchor: Tensor, positive: Tensor, negatives: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ConfigError("need a non-empty (N, D) negative matrix")
    pos_logit = (anchor * positive).sum(-1) / temperature
    neg_logits = negatives @ anchor / temperature
    all_logits = torch.cat([pos_logit.reshape(1), neg_logits])
    return torch.logsumexp(all_logits, dim=0) - pos_logit


def inter_loss(query: Tensor, positive: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """Softmax contrastive loss of one query against its positive and negatives."""
    return _contrastive(query, positive, negatives, tau)


def intra_loss(image_rep: Tensor, text_rep: Tensor, unrelated_texts: Tensor, tau_tilde: float) -> Tensor:
    """Image-anchored contrastive loss pulling an item toward its own text."""
    return _contrastive(image_rep, text_rep, unrelated_texts, tau_tilde)


# ---------------------------------------------------------------------------
# reliability filtering


def schedule_delta_bar(step: int, total_steps: int, schedule: FilterSchedule) -> float:
    """Linear decay of the margin offset across the run; endpoints included."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps
    return schedule.delta_bar_start + (schedule.delta_bar_end - schedule.delta_bar_start) * frac


def reliability_weight(
    query: Tensor, positive: Tensor, negative: Tensor, schedule: FilterSchedule, step: int, total_steps: int
) -> Tensor:
    """Sigmoid confidence that the pair outranks the mined negative by the current offset."""
    schedule.validate()
    margin = (query * positive).sum(-1) - (query * negative).sum(-1)
    delta_bar = schedule_delta_bar(step, total_steps, schedule)
    return torch.sigmoid(schedule.sharpness * (margin - delta_bar))


def filter_weights(phi: Tensor, delta_threshold: float) -> Tensor:
    """Apply the confidence threshold: keep phi below it, snap to 1 at or above it."""
    return torch.where(phi < delta_threshold, phi, torch.ones_like(phi))


# ---------------------------------------------------------------------------
# composition


@dataclass
class LossBreakdown:
    """Every term entering one step's total, for logging and recomposition checks."""

    objective_losses: dict[AlignmentObjective, float]
    omega: dict[AlignmentObjective, float]
    aux: float
    sparsity: float
    mean_phi: float
    total: float
    extras: dict[str, float] = field(default_factory=dict)


def total_loss(
    objective_losses: dict[AlignmentObjective, Tensor],
    omega: Tensor,
    aux: Tensor,
    sparsity: Tensor,
    alpha_aux: float,
    beta_sparsity: float,
) -> Tensor:
    """Weighted objective sum plus the two regularizers.

    ``objective_losses`` holds the filter-weighted batch means; omega carries
    one weight per objective index. Raises on any non-finite part, naming it.
    """
    total = alpha_aux * aux + beta_sparsity * sparsity
    for objective, value in objective_losses.items():
        if not torch.isfinite(value):
            raise NumericsError(f"non-finite loss for {objective.name}")
        total = total + omega[int(objective)] * value
    for name, value in (("aux", aux), ("sparsity", sparsity), ("total", total)):
        if not torch.isfinite(value):
            raise NumericsError(f"non-finite {name} term")
    return total


# ---------------------------------------------------------------------------
# batched forms used by the training loop


def batched_inter_losses(queries: Tensor, positives: Tensor, hard_negatives: Tensor, tau: float) -> tuple[Tensor, Tensor]:
    """Per-triplet inter losses for one query modality over a batch.

    Row j contrasts query j against positive j; the denominator adds the
    triplet's own hard negative and every other in-batch positive. Returns
    (losses (B,), margins (B,)) where the margin is the query-positive minus
    query-hard-negative similarity feeding the reliability filter.
    """
    if queries.shape != positives.shape or queries.shape != hard_negatives.shape:
        raise ConfigError("queries, positives, and hard negatives must align")
    b = queries.shape[0]
    sims = queries @ positives.T  # (B, B); diagonal is the paired positive
    hard = (queries * hard_negatives).sum(-1)  # (B,)
    logits = torch.cat([sims, hard.unsqueeze(1)], dim=1) / tau
    losses = torch.logsumexp(logits, dim=1) - torch.diagonal(sims) / tau
    margins = torch.diagonal(sims) - hard
    return losses, margins


def batched_intra_losses(anchors: Tensor, own_texts: Tensor, opposite_texts: Tensor, tau_tilde: float) -> Tensor:
    """Per-item intra losses: image anchors vs own text, against the opposite
    item's text and the other in-batch texts of the same role."""
    sims = anchors @ own_texts.T
    opposite = (anchors * opposite_texts).sum(-1)
    logits = torch.cat([sims, opposite.unsqueeze(1)], dim=1) / tau_tilde
    return torch.logsumexp(logits, dim=1) - torch.diagonal(sims) / tau_tilde


def batch_objective_losses(
    reps: dict[str, Tensor],
    tau: float,
    tau_tilde: float,
    schedule: FilterSchedule,
    step: int,
    total_steps: int,
    filtering_enabled: bool,
    use_intra: bool,
) -> tuple[dict[AlignmentObjective, Tensor], Tensor]:
    """All per-objective batch losses from one step's representations.

    ``reps`` maps role keys (``q_t``, ``q_i``, ``q_mm``, ``p_t``, ``p_i``,
    ``p_mm``, ``n_t``, ``n_i``, ``n_mm``) to (B, D) matrices. Inter losses are
    filter-weighted per triplet before batch-averaging, each objective using
    margins under its own query modality. Returns the loss map and the mean
    reliability weight across the inter objectives.
    """
    losses: dict[AlignmentObjective, Tensor] = {}
    phis = []
    query_by_objective = {
        AlignmentObjective.INTER_TEXT: "q_t",
        AlignmentObjective.INTER_IMAGE: "q_i",
        AlignmentObjective.INTER_MULTIMODAL: "q_mm",
    }
    for objective in INTER_OBJECTIVES:
        key = query_by_objective[objective]
        if key not in reps:
            continue
        per_triplet, margins = batched_inter_losses(reps[key], reps["p_mm"], reps["n_mm"], tau)
        delta_bar = schedule_delta_bar(step, total_steps, schedule)
        phi = torch.sigmoid(schedule.sharpness * (margins - delta_bar))
        phis.append(phi)
        if filtering_enabled:
            per_triplet = filter_weights(phi, schedule.delta_threshold) * per_triplet
        losses[objective] = per_triplet.mean()
    if use_intra:
        losses[AlignmentObjective.INTRA_POSITIVE] = batched_intra_losses(
            reps["p_i"], reps["p_t"], reps["n_t"], tau_tilde
        ).mean()
        losses[AlignmentObjective.INTRA_NEGATIVE] = batched_intra_losses(
            reps["n_i"], reps["n_t"], reps["p_t"], tau_tilde
        ).mean()
    mean_phi = torch.stack([p.mean() for p in phis]).mean() if phis else torch.zeros(())
    return losses, mean_phi
