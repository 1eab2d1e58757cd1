"""Configuration dataclasses and the flat key=value config file format.

All run configuration (training, dataset manifests) lives in flat text files
of ``key = value`` lines so that every artifact can be hashed and reproduced.
Nested dataclasses are flattened with dotted keys (``encoder.moe.top_k``).
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


# ---------------------------------------------------------------------------
# flat key=value files


def parse_flat_file(path: str | Path) -> dict[str, str]:
    """Parse a flat config file into a string-to-string map.

    Lines are ``key = value``; blank lines and ``#`` comments are ignored.
    Duplicate keys are an error so that a config has one unambiguous reading.
    """
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def write_flat_file(path: str | Path, items: dict[str, str]) -> None:
    lines = [f"{k} = {items[k]}" for k in items]
    Path(path).write_text("\n".join(lines) + "\n")


def _coerce(raw: str, typ, key: str):
    # Optional[X] arrives as 'X | None'; treat the empty string / 'none' as None.
    text = raw.strip()
    type_str = str(typ)
    optional = "None" in type_str
    if optional and text.lower() in ("", "none", "null"):
        return None
    base = type_str.replace("| None", "").replace("Optional[", "").rstrip("]").strip()
    try:
        if base in ("<class 'int'>", "int"):
            return int(text)
        if base in ("<class 'float'>", "float"):
            return float(text)
        if base in ("<class 'bool'>", "bool"):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if base in ("<class 'str'>", "str"):
            return text
        if base.startswith("tuple"):
            return tuple(int(p) for p in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unsupported config field type for {key!r}: {typ}")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ":".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_config(obj, prefix: str = "") -> dict[str, str]:
    """Flatten a config dataclass to dotted string keys, depth first."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten_config(value, prefix=f"{key}."))
        else:
            out[key] = _render(value)
    return out


def _nested_class(f: dataclasses.Field):
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        candidate = f.default_factory()
        if dataclasses.is_dataclass(candidate):
            return candidate.__class__
    return None


def _leaf_keys(cls, prefix: str = "") -> set[str]:
    keys: set[str] = set()
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        sub_cls = _nested_class(f)
        if sub_cls is not None:
            keys |= _leaf_keys(sub_cls, prefix=f"{key}.")
        else:
            keys.add(key)
    return keys


def unflatten_config(cls, items: dict[str, str], prefix: str = ""):
    """Rebuild a config dataclass from dotted keys, defaulting absent fields.

    Keys that match no field are rejected, so a typo fails instead of
    silently running with the default value.
    """
    if not prefix:
        unknown = sorted(set(items) - _leaf_keys(cls))
        if unknown:
            raise ConfigError(f"unknown keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        sub_cls = _nested_class(f)
        if sub_cls is not None:
            kwargs[f.name] = unflatten_config(sub_cls, items, prefix=f"{key}.")
        elif key in items:
            kwargs[f.name] = _coerce(items[key], f.type, key)
    return cls(**kwargs)


def config_hash(obj, exclude: tuple[str, ...] = ("out_dir",)) -> str:
    """Short stable hash of a config dataclass, used to key runs and artifacts.

    ``out_dir`` is skipped by default: where results land never changes what
    they are, and the same run must keep its hash when written elsewhere.
    """
    flat = flatten_config(obj)
    canon = "\n".join(f"{k}={flat[k]}" for k in sorted(flat) if k not in exclude)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# model configuration


@dataclass(frozen=True)
class MoEConfig:
    """Mixture-of-experts sublayer configuration."""

    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 128
    num_objectives: int = 5

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not (1 <= self.top_k <= self.num_experts):
            raise ConfigError("top_k must be in [1, num_experts]")
        if self.expert_hidden < 1:
            raise ConfigError("expert_hidden must be >= 1")
        if self.num_objectives < 1:
            raise ConfigError("num_objectives must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    """Shared multimodal encoder configuration.

    ``text_len`` caps each text segment (title, enriched title); every image
    contributes ``visual_tokens`` tokens through the patch projector.
    """

    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_len: int = 16
    visual_tokens: int = 4
    patch_features: int = 32
    vocab_size: int = 512
    prompt_len: int = 4
    normalize_output: bool = True
    moe: MoEConfig = field(default_factory=MoEConfig)

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be a positive multiple of n_heads")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        for name in ("text_len", "visual_tokens", "patch_features", "vocab_size", "prompt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.moe.validate()


@dataclass(frozen=True)
class FilterSchedule:
    """Reliability filter: sigmoid sharpness plus a decaying margin offset.

    The offset decays linearly from ``delta_bar_start`` to ``delta_bar_end``
    over the full training run; weights below ``delta_threshold`` are applied
    as-is, weights at or above it snap to 1.
    """

    delta_bar_start: float = 0.2
    delta_bar_end: float = -0.2
    sharpness: float = 5.0
    delta_threshold: float = 0.6

    def validate(self) -> None:
        if self.sharpness <= 0:
            raise ConfigError("sharpness must be > 0")
        if not (0.0 < self.delta_threshold <= 1.0):
            raise ConfigError("delta_threshold must be in (0, 1]")


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a synthetic triplet dataset byte for byte."""

    seed: int = 0
    train_count: int = 5000
    test_count: int = 500
    vocab_size: int = 512
    patches: int = 4
    patch_features: int = 32
    text_len: int = 16
    title_len: int = 12
    description_len: int = 12
    n_aug: int = 2
    latent_dim: int = 16
    image_noise: float = 0.15
    topic_sharpness: float = 4.0
    positive_jitter: float = 0.08
    hardness_cap: float = 0.6
    n_categories: int = 10
    n_attributes: int = 8
    keyword_tokens: int = 64
    keywords_per_item: int = 4
    cluster_spread: float | None = None
    noise_flip_rate: float | None = None

    def validate(self) -> None:
        if self.train_count < 1 or self.test_count < 0:
            raise ConfigError("counts must be positive")
        if self.title_len > self.text_len:
            raise ConfigError("title_len must be <= text_len")
        if self.keyword_tokens >= self.vocab_size:
            raise ConfigError("keyword_tokens must leave room for topic tokens")
        if self.keywords_per_item > self.keyword_tokens:
            raise ConfigError("keywords_per_item must be <= keyword_tokens")
        if not (-1.0 <= self.hardness_cap <= 1.0):
            raise ConfigError("hardness_cap must be a cosine in [-1, 1]")
        if self.noise_flip_rate is not None and not (0.0 <= self.noise_flip_rate <= 1.0):
            raise ConfigError("noise_flip_rate must be in [0, 1]")

    def save(self, path: str | Path) -> None:
        write_flat_file(path, flatten_config(self))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        manifest = unflatten_config(cls, parse_flat_file(path))
        manifest.validate()
        return manifest


# ---------------------------------------------------------------------------
# training configuration

MODE_JOINT = "joint"
MODE_MIXED = "mixed"


@dataclass(frozen=True)
class TrainConfig:
    """Full training run configuration; hashable for reproducibility checks."""

    dataset: str = ""
    out_dir: str = ""
    mode: str = MODE_JOINT
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    tau: float = 0.07
    tau_tilde: float = 0.07
    alpha_aux: float = 0.01
    beta_sparsity: float = 0.01
    mixed_ratio: tuple = (12, 3, 2)
    filtering_enabled: bool = True
    use_intra: bool = True
    renormalize_omega: bool = True
    detach_omega_preferences: bool = False
    log_every: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    filter: FilterSchedule = field(default_factory=FilterSchedule)

    def validate(self) -> None:
        if self.mode not in (MODE_JOINT, MODE_MIXED):
            raise ConfigError(f"mode must be '{MODE_JOINT}' or '{MODE_MIXED}'")
        if self.steps < 0 or self.batch_size < 2:
            raise ConfigError("steps must be >= 0 and batch_size >= 2")
        if self.tau <= 0 or self.tau_tilde <= 0:
            raise ConfigError("temperatures must be > 0")
        if len(self.mixed_ratio) != 3 or any(r < 0 for r in self.mixed_ratio) or sum(self.mixed_ratio) < 1:
            raise ConfigError("mixed_ratio needs three non-negative counts summing to >= 1")
        self.encoder.validate()
        self.filter.validate()

    def save(self, path: str | Path) -> None:
        write_flat_file(path, flatten_config(self))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        cfg = unflatten_config(cls, parse_flat_file(path))
        cfg.validate()
        return cfg
