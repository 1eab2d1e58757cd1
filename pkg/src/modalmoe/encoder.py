"""Shared multimodal encoder.

Text tokens and projected image patches are concatenated into one sequence,
run through pre-norm transformer blocks whose feed-forward sublayer is the
token-level mixture of experts, mean-pooled over all final hidden states, and
optionally L2-normalized. Image-only inputs are prefixed with a learned
instructional prompt. Positional embeddings restart per text segment and are
shared across image slots; segment embeddings distinguish title, enriched
title, original image, augmented image, and prompt positions. Positional and
segment tables start at zero so a fresh zero-layer encoder reduces to the
token embedding itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch
from torch import Tensor, nn

from .config import EncoderConfig
from .data import ProductContent, ValidationError
from .moe import GateOutput, LayerGateStats, MoELayer


class ModalityComposition(IntEnum):
    TEXT_ONLY = 0
    IMAGE_ONLY = 1
    MULTIMODAL = 2


MODALITY_SHORT = {
    ModalityComposition.TEXT_ONLY: "t",
    ModalityComposition.IMAGE_ONLY: "i",
    ModalityComposition.MULTIMODAL: "mm",
}
SHORT_MODALITY = {v: k for k, v in MODALITY_SHORT.items()}


class Segment(IntEnum):
    TITLE = 0
    ENRICHED = 1
    IMAGE = 2
    AUG_IMAGE = 3
    PROMPT = 4


@dataclass
class Representation:
    """Pooled encoder output for one item under one modality composition."""

    vector: np.ndarray
    modality: ModalityComposition


@dataclass
class TokenLayout:
    """Human-readable labels and segment tags for one assembled sequence."""

    labels: list[str]
    segments: list[Segment]

    def __len__(self) -> int:
        return len(self.labels)


def sequence_layout(content: ProductContent, modality: ModalityComposition, cfg: EncoderConfig) -> TokenLayout:
    """Validate one input and describe its token sequence without embedding it."""
    labels: list[str] = []
    segments: list[Segment] = []
    wants_text = modality in (ModalityComposition.TEXT_ONLY, ModalityComposition.MULTIMODAL)
    wants_image = modality in (ModalityComposition.IMAGE_ONLY, ModalityComposition.MULTIMODAL)

    if modality == ModalityComposition.IMAGE_ONLY:
        labels += [f"[prompt{i}]" for i in range(cfg.prompt_len)]
        segments += [Segment.PROMPT] * cfg.prompt_len

    if wants_text:
        if not content.title:
            raise ValidationError("text modality requested but the title is empty")
        for seq, seg, tag in ((content.title, Segment.TITLE, "t"), (content.enriched_title, Segment.ENRICHED, "e")):
            if seq is None:
                continue
            if len(seq) > cfg.text_len:
                raise ValidationError(f"text segment of {len(seq)} tokens exceeds text_len={cfg.text_len}")
            for tok in seq:
                if not (0 <= tok < cfg.vocab_size):
                    raise ValidationError(f"token id {tok} outside vocabulary of {cfg.vocab_size}")
            labels += [f"{tag}{tok}" for tok in seq]
            segments += [seg] * len(seq)

    if wants_image:
        if content.image is None:
            raise ValidationError("image modality requested but no image present")
        images = [("img", content.image)] + [(f"aug{j}", a) for j, a in enumerate(content.aug_images)]
        for name, img in images:
            if img.shape != (cfg.visual_tokens, cfg.patch_features):
                raise ValidationError(
                    f"image shape {tuple(img.shape)} does not match "
                    f"(visual_tokens={cfg.visual_tokens}, patch_features={cfg.patch_features})"
                )
            labels += [f"[{name}.{p}]" for p in range(cfg.visual_tokens)]
            segments += [Segment.IMAGE if name == "img" else Segment.AUG_IMAGE] * cfg.visual_tokens

    return TokenLayout(labels=labels, segments=segments)


def _structure_key(content: ProductContent, modality: ModalityComposition) -> tuple:
    """Inputs sharing a key assemble into identically shaped sequences."""
    text = modality != ModalityComposition.IMAGE_ONLY
    image = modality != ModalityComposition.TEXT_ONLY
    return (
        int(modality),
        len(content.title) if text else 0,
        (len(content.enriched_title) if content.enriched_title is not None else -1) if text else -1,
        (1 + len(content.aug_images)) if image else 0,
    )


class Attention(nn.Module):
    """Plain multi-head self-attention with exposed per-head weights."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(mixed), attn  # attn: (B, H, S, S)


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.hidden_dim)
        self.attn = Attention(cfg.hidden_dim, cfg.n_heads)
        self.ln_moe = nn.LayerNorm(cfg.hidden_dim)
        self.moe = MoELayer(cfg.hidden_dim, cfg.moe)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, GateOutput, LayerGateStats]:
        attended, attn = self.attn(self.ln_attn(x))
        x = x + attended
        combined, gate_out, stats = self.moe(self.ln_moe(x))
        x = x + combined
        return x, attn, gate_out, stats


@dataclass
class EncoderOutput:
    """Batched encoder results plus the routing bookkeeping training needs."""

    reps: Tensor  # (B, D) pooled, normalized when configured
    gate_means: Tensor  # (B, Z) token-mean routing weights at the final MoE layer
    layer_stats: list[LayerGateStats]
    attention: list[Tensor] | None  # per layer (B, H, S, S) when requested


class MultimodalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.token_embedding.weight, 0.0, 0.02)
        self.image_projector = nn.Linear(cfg.patch_features, d)
        # Zero-init so additive tables perturb nothing until trained.
        self.pos_text = nn.Parameter(torch.zeros(cfg.text_len, d))
        self.pos_image = nn.Parameter(torch.zeros(cfg.visual_tokens, d))
        self.segment_embedding = nn.Parameter(torch.zeros(len(Segment), d))
        self.prompt = nn.Parameter(torch.empty(cfg.prompt_len, d).normal_(0.0, 0.02))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))

    # -- sequence assembly ---------------------------------------------------

    def _embed_batch(self, contents: list[ProductContent], modality: ModalityComposition) -> Tensor:
        """Embed same-structure inputs into a (B, S, D) tensor."""
        cfg = self.cfg
        dtype = self.token_embedding.weight.dtype
        parts: list[Tensor] = []
        b = len(contents)

        if modality == ModalityComposition.IMAGE_ONLY:
            seg = self.segment_embedding[Segment.PROMPT]
            parts.append((self.prompt + seg).unsqueeze(0).expand(b, -1, -1))

        if modality != ModalityComposition.IMAGE_ONLY:
            for seq_of, segment in ((lambda c: c.title, Segment.TITLE), (lambda c: c.enriched_title, Segment.ENRICHED)):
                if seq_of(contents[0]) is None:
                    continue
                ids = torch.tensor([seq_of(c) for c in contents], dtype=torch.long)
                emb = self.token_embedding(ids) + self.pos_text[: ids.shape[1]] + self.segment_embedding[segment]
                parts.append(emb)

        if modality != ModalityComposition.TEXT_ONLY:
            n_images = 1 + len(contents[0].aug_images)
            for j in range(n_images):
                feats = torch.stack(
                    [
                        torch.as_tensor(c.image if j == 0 else c.aug_images[j - 1], dtype=dtype)
                        for c in contents
                    ]
                )
                segment = Segment.IMAGE if j == 0 else Segment.AUG_IMAGE
                emb = self.image_projector(feats) + self.pos_image + self.segment_embedding[segment]
                parts.append(emb)

        return torch.cat(parts, dim=1)

    # -- forward paths ---------------------------------------------------------

    def forward_embedded(self, x: Tensor, collect_attention: bool = False) -> EncoderOutput:
        attention: list[Tensor] = []
        gate_means = None
        layer_stats: list[LayerGateStats] = []
        for block in self.blocks:
            x, attn, gate_out, stats = block(x)
            layer_stats.append(stats)
            gate_means = gate_out.weights.mean(dim=1)
            if collect_attention:
                attention.append(attn)
        reps = x.mean(dim=1)
        if self.cfg.normalize_output:
            reps = reps / reps.norm(dim=-1, keepdim=True)
        if gate_means is None:  # zero-layer encoder still reports (uniform) routing means
            z = self.cfg.moe.num_experts
            gate_means = x.new_full((x.shape[0], z), 1.0 / z)
        return EncoderOutput(
            reps=reps,
            gate_means=gate_means,
            layer_stats=layer_stats,
            attention=attention if collect_attention else None,
        )

    def encode_batch(
        self, items: list[tuple[ProductContent, ModalityComposition]], collect_attention: bool = False
    ) -> tuple[Tensor, Tensor, list[LayerGateStats], list[list[Tensor]]]:
        """Encode a mixed batch, grouping same-shaped sequences into single forwards.

        Returns per-item reps (B, D), per-item final-layer gate means (B, Z),
        the per-forward layer stats, and per-item attention stacks when asked.
        """
        if not items:
            raise ValidationError("encode_batch on an empty item list")
        for content, modality in items:
            sequence_layout(content, modality, self.cfg)
        groups: dict[tuple, list[int]] = {}
        for i, (content, modality) in enumerate(items):
            groups.setdefault(_structure_key(content, modality), []).append(i)

        reps: list[Tensor | None] = [None] * len(items)
        means: list[Tensor | None] = [None] * len(items)
        attn_per_item: list[list[Tensor]] = [[] for _ in items]
        all_stats: list[LayerGateStats] = []
        for key in sorted(groups):
            idx = groups[key]
            contents = [items[i][0] for i in idx]
            modality = items[idx[0]][1]
            out = self.forward_embedded(self._embed_batch(contents, modality), collect_attention)
            all_stats.extend(out.layer_stats)
            for row, i in enumerate(idx):
                reps[i] = out.reps[row]
                means[i] = out.gate_means[row]
                if collect_attention and out.attention is not None:
                    attn_per_item[i] = [layer[row] for layer in out.attention]
        return torch.stack(reps), torch.stack(means), all_stats, attn_per_item

    # -- public single-item operations -----------------------------------------

    @torch.no_grad()
    def encode(self, content: ProductContent, modality: ModalityComposition) -> Representation:
        reps, _, _, _ = self.encode_batch([(content, modality)])
        return Representation(vector=reps[0].to(torch.float32).numpy().copy(), modality=modality)

    @torch.no_grad()
    def attention_weights(self, content: ProductContent, modality: ModalityComposition) -> np.ndarray:
        """Per-layer, per-head attention maps, shape (n_layers, n_heads, S, S)."""
        if self.cfg.n_layers == 0:
            raise ValidationError("attention_weights on a zero-layer encoder")
        _, _, _, attn = self.encode_batch([(content, modality)], collect_attention=True)
        return torch.stack(attn[0]).to(torch.float32).numpy()


class JointModel(nn.Module):
    """Encoder plus the global expert-objective coupling matrix."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.encoder = MultimodalEncoder(cfg)
        moe = cfg.moe
        # Small random start: near-uniform preferences with ties broken, so
        # entropy descent has a direction from step one.
        self.coupling = nn.Parameter(torch.empty(moe.num_experts, moe.num_objectives).normal_(0.0, 0.05))

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg


def build_model(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> JointModel:
    """Deterministically initialized model; the seed fully fixes every parameter."""
    torch.manual_seed(seed)
    model = JointModel(cfg)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model
