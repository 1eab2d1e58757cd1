"""Training loop, schedules, and checkpoint serialization.

Two modes share one loss stack. Joint mode optimizes all five alignment
objectives every step, weighting them by the routing-derived objective
weights and adding the balance and sparsity regularizers. Mixed mode is the
single-objective baseline: each step trains exactly one inter objective,
with query modalities interleaved deterministically at the configured
image:text:multimodal ratio, and no objective weighting or intra losses.

Checkpoints are a flat name-to-array map: a magic line, a JSON header with
the encoder config, metadata, parameter shapes, and a payload digest, then
raw little-endian float32 data. Same config and seed reproduce the file
byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import EncoderConfig, TrainConfig, config_hash, flatten_config, unflatten_config
from .config import ConfigError
from .data import ParseError, Triplet, find_manifest, load_triplets
from .encoder import MODALITY_SHORT, JointModel, ModalityComposition, build_model
from .moe import (
    INTER_OBJECTIVES,
    AlignmentObjective,
    expert_preferences,
    load_balance_loss,
    objective_weights,
    sparsity_loss,
)
from .objectives import LossBreakdown, NumericsError, batch_objective_losses, schedule_delta_bar, total_loss


class IntegrityError(RuntimeError):
    """Checkpoint content does not match its own header or the expected config."""


# ---------------------------------------------------------------------------
# schedules


def cosine_learning_rate(step: int, total_steps: int, base: float) -> float:
    if total_steps < 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


_MIXED_ORDER = (ModalityComposition.IMAGE_ONLY, ModalityComposition.TEXT_ONLY, ModalityComposition.MULTIMODAL)


def mixed_modality_at(step: int, ratio: tuple, seed: int) -> ModalityComposition:
    """Deterministic interleaving that hits the exact ratio every ``sum(ratio)`` steps.

    Each block is a seeded permutation of the ratio multiset, so long-run
    frequencies match the configured mix to within one block.
    """
    block_len = sum(ratio)
    block, offset = divmod(step, block_len)
    tile = [m for m, count in zip(_MIXED_ORDER, ratio) for _ in range(count)]
    perm = np.random.default_rng(np.random.PCG64((seed, 23, block))).permutation(len(tile))
    return tile[perm[offset]]


# ---------------------------------------------------------------------------
# per-step losses

_ROLES = ("q_t", "q_i", "q_mm", "p_t", "p_i", "p_mm", "n_t", "n_i", "n_mm")
_ROLE_MODALITY = {
    "t": ModalityComposition.TEXT_ONLY,
    "i": ModalityComposition.IMAGE_ONLY,
    "mm": ModalityComposition.MULTIMODAL,
}
_OBJECTIVE_GATE_ROLE = {
    AlignmentObjective.INTER_TEXT: "q_t",
    AlignmentObjective.INTER_IMAGE: "q_i",
    AlignmentObjective.INTER_MULTIMODAL: "q_mm",
    AlignmentObjective.INTRA_POSITIVE: "p_i",
    AlignmentObjective.INTRA_NEGATIVE: "n_i",
}


def _encode_roles(model: JointModel, batch: list[Triplet], roles: tuple[str, ...]):
    items = []
    for role in roles:
        side, modality = role.split("_")
        attr = {"q": "query", "p": "positive", "n": "negative"}[side]
        for t in batch:
            items.append((getattr(t, attr), _ROLE_MODALITY[modality]))
    reps, gate_means, stats, _ = model.encoder.encode_batch(items)
    b = len(batch)
    rep_map = {role: reps[i * b : (i + 1) * b] for i, role in enumerate(roles)}
    mean_map = {role: gate_means[i * b : (i + 1) * b] for i, role in enumerate(roles)}
    return rep_map, mean_map, stats


def compute_joint_loss(
    model: JointModel, batch: list[Triplet], cfg: TrainConfig, step: int
) -> tuple[torch.Tensor, LossBreakdown]:
    """One joint-mode step's total loss over a batch, plus its logged parts."""
    rep_map, mean_map, stats = _encode_roles(model, batch, _ROLES)
    losses, mean_phi = batch_objective_losses(
        rep_map,
        tau=cfg.tau,
        tau_tilde=cfg.tau_tilde,
        schedule=cfg.filter,
        step=step,
        total_steps=cfg.steps,
        filtering_enabled=cfg.filtering_enabled,
        use_intra=cfg.use_intra,
    )
    prefs = expert_preferences(model.coupling)
    omega_prefs = prefs.detach() if cfg.detach_omega_preferences else prefs
    empty = rep_map["q_t"].new_zeros((0, model.cfg.moe.num_experts))
    gate_map = {
        objective: (mean_map[role] if AlignmentObjective(objective) in losses else empty)
        for objective, role in _OBJECTIVE_GATE_ROLE.items()
    }
    omega = objective_weights(gate_map, omega_prefs, renormalize=cfg.renormalize_omega)
    aux = load_balance_loss(stats)
    sparsity = sparsity_loss(prefs)
    total = total_loss(losses, omega, aux, sparsity, cfg.alpha_aux, cfg.beta_sparsity)
    breakdown = LossBreakdown(
        objective_losses={k: float(v.detach()) for k, v in losses.items()},
        omega={AlignmentObjective(m): float(omega[m].detach()) for m in range(omega.shape[0])},
        aux=float(aux.detach()),
        sparsity=float(sparsity.detach()),
        mean_phi=float(mean_phi.detach()),
        total=float(total.detach()),
    )
    return total, breakdown


def compute_mixed_loss(
    model: JointModel, batch: list[Triplet], cfg: TrainConfig, step: int, modality: ModalityComposition
) -> tuple[torch.Tensor, LossBreakdown]:
    """One mixed-mode step: a single inter objective at the sampled query modality."""
    query_role = f"q_{MODALITY_SHORT[modality]}"
    rep_map, _, stats = _encode_roles(model, batch, (query_role, "p_mm", "n_mm"))
    losses, mean_phi = batch_objective_losses(
        rep_map,
        tau=cfg.tau,
        tau_tilde=cfg.tau_tilde,
        schedule=cfg.filter,
        step=step,
        total_steps=cfg.steps,
        filtering_enabled=cfg.filtering_enabled,
        use_intra=False,
    )
    (objective, loss_value), = losses.items()
    aux = load_balance_loss(stats)
    total = loss_value + cfg.alpha_aux * aux
    if not torch.isfinite(total):
        raise NumericsError(f"non-finite loss for {objective.name}")
    breakdown = LossBreakdown(
        objective_losses={objective: float(loss_value.detach())},
        omega={},
        aux=float(aux.detach()),
        sparsity=0.0,
        mean_phi=float(mean_phi.detach()),
        total=float(total.detach()),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    config_hash: str
    initial_total: float
    final_total: float


class _BatchSampler:
    """Seeded epoch shuffling; batches are re-sorted by triplet id so the
    loss accumulation order never depends on the shuffle."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size > n:
            raise ConfigError(f"batch_size {batch_size} exceeds dataset of {n} triplets")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.PCG64((seed, 11)))
        self.order = self.rng.permutation(n)
        self.cursor = 0

    def next_batch(self) -> list[int]:
        if self.cursor + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        picked = self.order[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return sorted(int(i) for i in picked)


def train(cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    # Tensors here are tiny; one thread is faster than the sync overhead and
    # keeps checkpoint bytes independent of the ambient thread setting.
    torch.set_num_threads(1)
    run_hash = config_hash(cfg)
    dataset_path = Path(cfg.dataset)
    if dataset_path.is_dir():
        dataset_path = dataset_path / "train.jsonl"
    manifest = find_manifest(dataset_path)
    triplets = load_triplets(dataset_path, manifest)
    triplets.sort(key=lambda t: t.triplet_id)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else dataset_path.parent / f"run-{run_hash}"
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.bin"

    model = build_model(cfg.encoder, cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sampler = _BatchSampler(len(triplets), cfg.batch_size, cfg.seed)

    initial_total = float("nan")
    final_total = float("nan")
    with open(metrics_path, "w") as log:
        for step in range(cfg.steps):
            lr = cosine_learning_rate(step, cfg.steps, cfg.learning_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = [triplets[i] for i in sampler.next_batch()]
            if cfg.mode == "joint":
                modality = None
                try:
                    total, breakdown = compute_joint_loss(model, batch, cfg, step)
                except NumericsError as exc:
                    raise NumericsError(f"step {step}: {exc}") from exc
            else:
                modality = mixed_modality_at(step, tuple(cfg.mixed_ratio), cfg.seed)
                try:
                    total, breakdown = compute_mixed_loss(model, batch, cfg, step, modality)
                except NumericsError as exc:
                    raise NumericsError(f"step {step}: {exc}") from exc
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()

            if step == 0:
                initial_total = breakdown.total
            final_total = breakdown.total
            if cfg.log_every and step % cfg.log_every == 0:
                row = {
                    "step": step,
                    "mode": cfg.mode,
                    "lr": lr,
                    "delta_bar": schedule_delta_bar(step, cfg.steps, cfg.filter),
                    "losses": {k.name.lower(): v for k, v in breakdown.objective_losses.items()},
                    "omega": {k.name.lower(): v for k, v in breakdown.omega.items()},
                    "aux": breakdown.aux,
                    "sparsity": breakdown.sparsity,
                    "mean_phi": breakdown.mean_phi,
                    "total": breakdown.total,
                }
                if modality is not None:
                    row["modality"] = MODALITY_SHORT[modality]
                log.write(json.dumps(row, separators=(",", ":")) + "\n")

    meta = {
        "config_hash": run_hash,
        "step": cfg.steps,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "dataset_seed": manifest.seed,
        "metrics": {"initial_total": initial_total, "final_total": final_total},
    }
    save_checkpoint(checkpoint_path, model, meta)
    cfg.save(out_dir / "config.cfg")
    return TrainResult(
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        config_hash=run_hash,
        initial_total=initial_total,
        final_total=final_total,
    )


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MODALMOE-CKPT-1\n"
_FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: JointModel, meta: dict) -> Path:
    state = model.state_dict()
    names = sorted(state)
    arrays = [state[n].detach().to(torch.float32).cpu().numpy() for n in names]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    header = {
        "format_version": _FORMAT_VERSION,
        "config": flatten_config(model.cfg),
        "meta": meta,
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return Path(path)


def load_checkpoint(
    path: str | Path, expected_config: EncoderConfig | None = None
) -> tuple[EncoderConfig, dict[str, np.ndarray], dict]:
    """Read a checkpoint. Raises ParseError on damage, IntegrityError on mismatch."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    header_end = raw.find(b"\n", len(_MAGIC))
    if header_end < 0:
        raise ParseError(f"{path}: truncated before header")
    try:
        header = json.loads(raw[len(_MAGIC) : header_end])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed header ({exc.msg})") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[header_end + 1 :]
    expected_len = sum(int(np.prod(p["shape"])) if p["shape"] else 1 for p in header["params"]) * 4
    if len(payload) != expected_len:
        raise ParseError(f"{path}: payload of {len(payload)} bytes, expected {expected_len} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload digest mismatch")
    stored_cfg = unflatten_config(EncoderConfig, header["config"])
    if expected_config is not None:
        stored_flat, want_flat = flatten_config(stored_cfg), flatten_config(expected_config)
        for key in sorted(want_flat):
            if stored_flat.get(key) != want_flat[key]:
                raise IntegrityError(
                    f"{path}: config field {key!r} is {stored_flat.get(key)}, expected {want_flat[key]}"
                )
    params: dict[str, np.ndarray] = {}
    offset = 0
    for p in header["params"]:
        count = int(np.prod(p["shape"])) if p["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(p["shape"])
        params[p["name"]] = arr.copy()
        offset += count * 4
    return stored_cfg, params, header["meta"]


def load_model(path: str | Path, expected_config: EncoderConfig | None = None) -> tuple[JointModel, dict]:
    cfg, params, meta = load_checkpoint(path, expected_config)
    model = build_model(cfg, seed=0)
    state = {name: torch.from_numpy(arr) for name, arr in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
