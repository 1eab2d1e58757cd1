"""Modality-balanced multimodal product embeddings.

A compact research implementation of a shared text-image encoder whose
feed-forward layers are a token-level mixture of experts, trained jointly on
inter-product and intra-product contrastive objectives. Routing statistics
couple experts to objectives through a learnable preference matrix that sets
per-objective loss weights, and a reliability filter down-weights triplets
the current embedding space distrusts. Includes a synthetic triplet data
generator, an offline co-augmentation pipeline, and retrieval/zero-shot
evaluation tooling.
"""
from .config import (
    ConfigError,
    DatasetManifest,
    EncoderConfig,
    FilterSchedule,
    MoEConfig,
    TrainConfig,
    config_hash,
)
from .data import (
    ParseError,
    ProductContent,
    Triplet,
    ValidationError,
    generate_dataset,
    inject_label_noise,
    load_triplets,
)
from .encoder import JointModel, ModalityComposition, MultimodalEncoder, Representation, build_model
from .moe import AlignmentObjective, expert_preferences, gate, load_balance_loss, moe_forward, objective_weights, sparsity_loss
from .objectives import (
    NumericsError,
    filter_weights,
    inter_loss,
    intra_loss,
    reliability_weight,
    schedule_delta_bar,
    total_loss,
)
from .training import IntegrityError, TrainResult, load_checkpoint, load_model, save_checkpoint, train
from .evaluation import EmbeddingIndex, build_index, classify_zero_shot, export_heatmap, recall_at_k, write_report
from .augmentation import (
    AugmentConfig,
    EntitySet,
    MockEditClient,
    MockEnrichmentClient,
    ReferenceEncoder,
    co_augment_dataset,
    enrich_title,
    expand_visual,
    extract_entities,
    similarity_filter,
)

__version__ = "0.1.0"
