"""Token-level mixture-of-experts routing and the expert-objective coupling.

The router softmaxes a linear gate over experts per token, keeps the top-k
activations (ties broken toward the lower expert index), and renormalizes the
kept weights to sum to one. A separate learnable expert-objective matrix maps
routing statistics to per-objective loss weights; its row-softmax is pushed
toward low entropy by the sparsity regularizer so experts specialize.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Sequence

import torch
from torch import Tensor, nn

from .config import ConfigError, MoEConfig


class AlignmentObjective(IntEnum):
    """Stable indices for the five alignment objectives."""

    INTER_TEXT = 0
    INTER_IMAGE = 1
    INTER_MULTIMODAL = 2
    INTRA_POSITIVE = 3
    INTRA_NEGATIVE = 4


INTER_OBJECTIVES = (
    AlignmentObjective.INTER_TEXT,
    AlignmentObjective.INTER_IMAGE,
    AlignmentObjective.INTER_MULTIMODAL,
)
INTRA_OBJECTIVES = (AlignmentObjective.INTRA_POSITIVE, AlignmentObjective.INTRA_NEGATIVE)


@dataclass
class GateOutput:
    """Routing of one token batch: softmax activations and the kept, renormalized weights."""

    probs: Tensor  # ... x Z softmax over experts
    indices: Tensor  # ... x k selected expert ids, by descending activation
    weights: Tensor  # ... x Z, zero outside the selection, rows sum to 1


def gate(hidden: Tensor, gate_weight: Tensor, top_k: int) -> GateOutput:
    """Route tokens: softmax over experts, keep top-k, renormalize the kept mass.

    Ties are broken toward the lower expert index via a stable descending sort,
    so routing is deterministic. ``hidden`` is (..., D), ``gate_weight`` (Z, D).
    """
    num_experts = gate_weight.shape[0]
    if not (1 <= top_k <= num_experts):
        raise ConfigError(f"top_k={top_k} outside [1, {num_experts}]")
    logits = hidden @ gate_weight.T
    probs = torch.softmax(logits, dim=-1)
    sorted_probs, sorted_idx = torch.sort(probs, dim=-1, descending=True, stable=True)
    kept_probs = sorted_probs[..., :top_k]
    indices = sorted_idx[..., :top_k]
    renorm = kept_probs / kept_probs.sum(dim=-1, keepdim=True)
    weights = torch.zeros_like(probs)
    weights = weights.scatter(-1, indices, renorm)
    return GateOutput(probs=probs, indices=indices, weights=weights)


def moe_forward(hidden: Tensor, experts: Sequence[nn.Module], weights: Tensor) -> Tensor:
    """Combine expert outputs with routing weights: sum_z w_z * f_z(h).

    All experts run densely; unselected experts carry zero weight, so their
    parameters receive no gradient from the combined output. Linear in the
    weights for fixed expert outputs.
    """
    if len(experts) != weights.shape[-1]:
        raise ConfigError(f"{len(experts)} experts but weight rows of {weights.shape[-1]}")
    stacked = torch.stack([f(hidden) for f in experts], dim=-1)  # ... x D x Z
    return (stacked * weights.unsqueeze(-2)).sum(dim=-1)


class Expert(nn.Module):
    """Two-layer GELU MLP, the feed-forward unit each token can be routed to."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(torch.nn.functional.gelu(self.up(x)))


@dataclass
class LayerGateStats:
    """Aggregates from one MoE layer over a token batch, used by the regularizers."""

    prob_sums: Tensor  # (Z,) sum of softmax activations over tokens, differentiable
    selection_counts: Tensor  # (Z,) how many (token, slot) selections hit each expert
    token_count: int
    top_k: int


class MoELayer(nn.Module):
    """Feed-forward sublayer: gate each token, run experts, combine."""

    def __init__(self, dim: int, cfg: MoEConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.gate_weight = nn.Parameter(torch.empty(cfg.num_experts, dim).normal_(0.0, 0.02))
        self.experts = nn.ModuleList(Expert(dim, cfg.expert_hidden) for _ in range(cfg.num_experts))

    def forward(self, x: Tensor) -> tuple[Tensor, GateOutput, LayerGateStats]:
        out = gate(x, self.gate_weight, self.cfg.top_k)
        combined = moe_forward(x, list(self.experts), out.weights)
        flat_probs = out.probs.reshape(-1, self.cfg.num_experts)
        counts = torch.zeros(self.cfg.num_experts, dtype=torch.long)
        counts.scatter_add_(
            0, out.indices.reshape(-1), torch.ones(out.indices.numel(), dtype=torch.long)
        )
        stats = LayerGateStats(
            prob_sums=flat_probs.sum(dim=0),
            selection_counts=counts,
            token_count=flat_probs.shape[0],
            top_k=self.cfg.top_k,
        )
        return combined, out, stats


# ---------------------------------------------------------------------------
# expert-objective coupling


def expert_preferences(coupling: Tensor) -> Tensor:
    """Row-softmax of the expert-objective matrix: each expert's distribution over objectives."""
    if coupling.ndim != 2:
        raise ConfigError("coupling matrix must be 2-d (experts x objectives)")
    return torch.softmax(coupling, dim=-1)


def objective_weights(
    gate_means: Mapping[AlignmentObjective, Tensor],
    preferences: Tensor,
    renormalize: bool = True,
) -> Tensor:
    """Per-objective loss weights from routing statistics.

    ``gate_means[m]`` holds the token-mean routing weights (one Z-vector per
    sample) of the samples feeding objective m. The raw weight of m averages
    the preference-weighted routing mass over those samples; raw weights are
    then rescaled so the weights of populated objectives average to one.
    Objectives with no samples sit out the rescaling with a neutral weight 1.
    """
    num_experts, num_objectives = preferences.shape
    provided = {int(k) for k in gate_means}
    if provided != set(range(num_objectives)):
        missing = sorted(set(range(num_objectives)) - provided)
        raise ConfigError(f"objective_weights needs every objective registered; missing {missing}")
    raws: dict[int, Tensor] = {}
    for m, means in gate_means.items():
        if means.numel() == 0:
            continue
        if means.shape[-1] != num_experts:
            raise ConfigError("gate means must have one column per expert")
        raws[int(m)] = (means @ preferences[:, int(m)]).mean()
    if not raws:
        raise ConfigError("objective_weights called with no populated objective")
    one = preferences.new_ones(())
    omega = [one.clone() for _ in range(num_objectives)]
    if renormalize:
        total = torch.stack(list(raws.values())).sum()
        for m, raw in raws.items():
            omega[m] = len(raws) * raw / total
    else:
        for m, raw in raws.items():
            omega[m] = raw
    return torch.stack(omega)


def load_balance_loss(stats: Sequence[LayerGateStats]) -> Tensor:
    """Switch-style balance penalty, averaged over MoE layers.

    Per layer: Z * sum_z fraction_z * mean_prob_z, where fraction_z is the
    share of routing slots assigned to expert z and mean_prob_z the mean gate
    activation. Uniform routing scores 1; full collapse onto one expert
    scores Z. Differentiable through the activations only.
    """
    if not stats:
        raise ConfigError("load_balance_loss needs at least one layer's stats")
    per_layer = []
    for s in stats:
        z = s.prob_sums.shape[0]
        total_slots = s.token_count * s.top_k
        if total_slots == 0:
            raise ConfigError("load_balance_loss on an empty token batch")
        fractions = s.selection_counts.to(s.prob_sums.dtype) / total_slots
        mean_probs = s.prob_sums / s.token_count
        per_layer.append(z * (fractions * mean_probs).sum())
    return torch.stack(per_layer).mean()


def sparsity_loss(preferences: Tensor) -> Tensor:
    """Mean Shannon entropy (natural log) of the expert preference rows.

    Zero when every expert concentrates on a single objective; ln(M) at the
    uniform coupling.
    """
    eps = torch.finfo(preferences.dtype).tiny
    row_entropy = -(preferences * torch.log(preferences.clamp_min(eps))).sum(dim=-1)
    return row_entropy.mean()
