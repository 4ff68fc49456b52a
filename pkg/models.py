# models.py
"""
Shared domain types: variant/mode enums and the dataclasses every module
passes around (configs, Gram specs, spectra, metrics, CSV rows).
"""

import math
from dataclasses import dataclass, field, asdict, fields
from enum import Enum
from typing import Optional

import numpy as np

from errors import InvalidConfigError


class Variant(Enum):
    MHA = "mha"
    MLA_PRE = "mla-pre"
    MLA_DEC = "mla-dec"
    MLA_NOPE = "mla-nope"

    @property
    def is_mla(self):
        return self is not Variant.MHA


class EigenMode(Enum):
    SINGULAR = "singular"
    SQUARED = "squared"


class StorageDtype(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy_dtype(self):
        return np.dtype("<f4") if self is StorageDtype.F32 else np.dtype("<f8")


# Toy-scale defaults (seconds per run on a laptop)
DEFAULT_D_MODEL = 64
DEFAULT_N_HEADS = 4
DEFAULT_D_HEAD = 16
DEFAULT_D_LATENT = 8
DEFAULT_SEQ_LEN = 32
DEFAULT_ROPE_FRAC = 0.5
DEFAULT_ROPE_BASE = 10000.0


def _require_positive_int(name, value):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise InvalidConfigError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class AttentionConfig:
    """Variant tag plus the dimensional hyperparameters of one attention layer"""
    variant: Variant = Variant.MHA
    d_model: int = DEFAULT_D_MODEL
    n_heads: int = DEFAULT_N_HEADS
    d_k: int = DEFAULT_D_HEAD
    d_latent: int = DEFAULT_D_LATENT
    rope_frac: float = DEFAULT_ROPE_FRAC
    rope_base: float = DEFAULT_ROPE_BASE
    seq_len: int = DEFAULT_SEQ_LEN
    causal: bool = True

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            raise InvalidConfigError(f"Unknown variant {self.variant!r}")
        for name in ("d_model", "n_heads", "d_k", "d_latent", "seq_len"):
            _require_positive_int(name, getattr(self, name))
        if self.d_k % 2:
            raise InvalidConfigError(f"d_k must be even for rotary pairs, got {self.d_k}")
        if not self.rope_base > 0:
            raise InvalidConfigError(f"rope_base must be positive, got {self.rope_base}")
        if not 0.0 <= self.rope_frac <= 1.0:
            raise InvalidConfigError(f"rope_frac must lie in [0, 1], got {self.rope_frac}")

        if self.variant.is_mla:
            if self.d_latent % 2:
                raise InvalidConfigError(f"d_latent must be even, got {self.d_latent}")
            if self.d_latent >= self.n_heads * self.d_k:
                raise InvalidConfigError(
                    f"d_latent={self.d_latent} must be smaller than H*d_k={self.n_heads * self.d_k} (compression)"
                )

        if self.variant is Variant.MLA_DEC:
            exact = self.rope_frac * self.d_k
            rope_dim = round(exact)
            if abs(exact - rope_dim) > 1e-9:
                raise InvalidConfigError(
                    f"rope_frac={self.rope_frac} gives rope_dim={exact:g} with d_k={self.d_k}; must be an integer"
                )
            if rope_dim % 2:
                raise InvalidConfigError(f"rope_dim={rope_dim} must be even (RoPE rotates coordinate pairs)")
            if rope_dim >= self.d_k:
                raise InvalidConfigError("rope_frac must be < 1 so the content branch is non-empty")

    @property
    def rope_dim(self):
        """Per-head rotary sub-vector width (decoupled variant only)"""
        if self.variant is not Variant.MLA_DEC:
            return 0
        return round(self.rope_frac * self.d_k)

    @property
    def content_dim(self):
        """Per-head width of the query/key content branch"""
        return self.d_k - self.rope_dim

    @property
    def qk_width(self):
        return self.n_heads * self.d_k

    def to_dict(self):
        data = asdict(self)
        data["variant"] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            data["variant"] = Variant(data["variant"])
        except (KeyError, ValueError):
            raise InvalidConfigError(f"Unknown or missing variant in {data!r}")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class GramSpec:
    """Which weight blocks were analyzed and the resulting (m, d_in)"""
    variant: Optional[Variant]
    layer_index: int
    m: int
    d_in: int
    eigen_mode: EigenMode = EigenMode.SINGULAR
    n_heads: int = 1
    rope_dim: int = 0

    @classmethod
    def synthetic(cls, m, d_in, eigen_mode=EigenMode.SINGULAR):
        """Spec for operands that do not come from a model checkpoint"""
        return cls(variant=None, layer_index=0, m=m, d_in=d_in, eigen_mode=eigen_mode)


@dataclass
class Spectrum:
    values: np.ndarray
    m: int
    d_in: int
    spec: Optional[GramSpec] = None

    @property
    def lambda1(self):
        return float(self.values[0]) if len(self.values) else 0.0


@dataclass(frozen=True)
class MpEdges:
    gamma: float
    lambda_minus: float
    lambda_plus: float


@dataclass(frozen=True)
class SpectralMetrics:
    mp_gap: float
    outlier_count: int
    outlier_energy: float
    mp_soft_rank: float
    stable_rank: float
    lambda1: float
    gamma: float
    n_eigs: int

    @property
    def normalized_stable_rank(self):
        return self.stable_rank / self.n_eigs if self.n_eigs else 0.0


# Metrics aggregated across layers / trials, in reporting order
AGGREGATED_METRICS = ("mp_gap", "outlier_count", "outlier_energy", "mp_soft_rank", "stable_rank", "lambda1")

# The five spectral measures plus stable rank over m; one heatmap each
HEATMAP_METRICS = ("mp_gap", "outlier_count", "outlier_energy", "mp_soft_rank", "stable_rank",
                   "normalized_stable_rank")


@dataclass(frozen=True)
class LayerSeriesPoint:
    step: int
    layer: int
    metrics: SpectralMetrics
    attention_entropy_bits: Optional[float] = None


@dataclass
class MetricsRow:
    """One CSV line of the metrics log; field order is the column order"""
    step: int
    layer: int
    variant: str
    m: int
    d_in: int
    gamma: float
    lambda1: float
    mp_gap: float
    outlier_count: int
    outlier_energy: float
    mp_soft_rank: float
    stable_rank: float
    attention_entropy_bits: Optional[float] = None

    @classmethod
    def from_metrics(cls, step, layer, variant, spec, metrics, attention_entropy_bits=None):
        return cls(
            step=step,
            layer=layer,
            variant=variant.value if isinstance(variant, Variant) else str(variant),
            m=spec.m,
            d_in=spec.d_in,
            gamma=metrics.gamma,
            lambda1=metrics.lambda1,
            mp_gap=metrics.mp_gap,
            outlier_count=metrics.outlier_count,
            outlier_energy=metrics.outlier_energy,
            mp_soft_rank=metrics.mp_soft_rank,
            stable_rank=metrics.stable_rank,
            attention_entropy_bits=attention_entropy_bits,
        )

    def to_point(self):
        metrics = SpectralMetrics(
            mp_gap=self.mp_gap,
            outlier_count=self.outlier_count,
            outlier_energy=self.outlier_energy,
            mp_soft_rank=self.mp_soft_rank,
            stable_rank=self.stable_rank,
            lambda1=self.lambda1,
            gamma=self.gamma,
            n_eigs=self.m,
        )
        return LayerSeriesPoint(self.step, self.layer, metrics, self.attention_entropy_bits)


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))
METRIC_VALUE_COLUMNS = ("gamma", "lambda1", "mp_gap", "outlier_count", "outlier_energy",
                        "mp_soft_rank", "stable_rank", "attention_entropy_bits")

# Computed from the logged columns at export time
DERIVED_METRICS = ("normalized_stable_rank",)


# Training defaults
DEFAULT_SEED = 1234
DEFAULT_STEPS = 1000
DEFAULT_LOG_EVERY = 50
DEFAULT_BATCH_SIZE = 8
DEFAULT_LEARNING_RATE = 0.3
DEFAULT_N_LAYERS = 2
DEFAULT_VOCAB_SIZE = 64
DEFAULT_SHARPNESS = 0.9
DEFAULT_CORPUS_LENGTH = 16384


@dataclass(frozen=True)
class TrainConfig:
    model: AttentionConfig = field(default_factory=AttentionConfig)
    n_layers: int = DEFAULT_N_LAYERS
    vocab_size: int = DEFAULT_VOCAB_SIZE
    steps: int = DEFAULT_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = DEFAULT_SEED
    log_every: int = DEFAULT_LOG_EVERY
    corpus_sharpness: float = DEFAULT_SHARPNESS
    corpus_length: int = DEFAULT_CORPUS_LENGTH
    heldout_fraction: float = 0.1
    init_scale: float = 1.0
    embed_std: float = 1.0
    unembed_std: float = 0.02
    store_f64: bool = False
    eigen_mode: EigenMode = EigenMode.SINGULAR
    progress: bool = True

    def __post_init__(self):
        for name in ("n_layers", "steps", "batch_size", "log_every", "corpus_length"):
            _require_positive_int(name, getattr(self, name))
        if self.vocab_size < 2:
            raise InvalidConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidConfigError(f"learning_rate must be a finite non-negative float, got {self.learning_rate}")
        if not 0.0 < self.corpus_sharpness < 1.0:
            raise InvalidConfigError(f"corpus_sharpness must lie in (0, 1), got {self.corpus_sharpness}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise InvalidConfigError(f"heldout_fraction must lie in (0, 1), got {self.heldout_fraction}")
        if self.model.seq_len < 2:
            raise InvalidConfigError("Training windows need seq_len >= 2 (one input and one target)")
        heldout = int(self.corpus_length * self.heldout_fraction)
        if heldout < self.model.seq_len or self.corpus_length - heldout < self.model.seq_len + 1:
            raise InvalidConfigError(
                f"corpus_length={self.corpus_length} too short for seq_len={self.model.seq_len}"
            )

    @property
    def storage_dtype(self):
        return StorageDtype.F64 if self.store_f64 else StorageDtype.F32

    def to_dict(self):
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["eigen_mode"] = self.eigen_mode.value
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["model"] = AttentionConfig.from_dict(data["model"])
        data["eigen_mode"] = EigenMode(data.get("eigen_mode", EigenMode.SINGULAR.value))
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})
