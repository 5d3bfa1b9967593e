"""Domain types, missing-state algebra, and run configuration.

Everything here is an immutable value type and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import torch


class ConfigError(Exception):
    """Raised for malformed or inconsistent run configuration."""


class Modality(IntEnum):
    """One sensor channel. Ordered RGB < NIR < TIR for deterministic iteration."""

    RGB = 0
    NIR = 1
    TIR = 2

    @property
    def short(self) -> str:
        return self.name.lower()


MODALITIES: tuple[Modality, ...] = (Modality.RGB, Modality.NIR, Modality.TIR)

EXTRACTED = "extracted"
RECOVERED = "recovered"


def parse_modality(token: str) -> Modality:
    try:
        return Modality[token.strip().upper()]
    except KeyError:
        raise ConfigError(
            f"unknown modality {token!r}; expected one of RGB, NIR, TIR"
        ) from None


def parse_modality_set(text: str) -> frozenset[Modality]:
    """Parse a comma-separated modality list; the empty string is the empty set."""
    text = text.strip()
    if not text:
        return frozenset()
    return frozenset(parse_modality(tok) for tok in text.split(","))


@dataclass(frozen=True, eq=True)
class MissingState:
    """Which modalities a sample actually carries.

    Empty states are representable (so they can be rejected by
    :func:`validate_state`) but invalid everywhere in the pipeline.
    """

    available: frozenset[Modality]

    @classmethod
    def of(cls, *modalities: Modality) -> "MissingState":
        return cls(frozenset(modalities))

    @classmethod
    def complete(cls) -> "MissingState":
        return cls(frozenset(MODALITIES))

    @property
    def missing(self) -> frozenset[Modality]:
        return frozenset(MODALITIES) - self.available

    @property
    def is_complete(self) -> bool:
        return self.available == frozenset(MODALITIES)

    def ordered(self) -> tuple[Modality, ...]:
        return tuple(sorted(self.available))

    def has(self, modality: Modality) -> bool:
        return modality in self.available

    def label(self) -> str:
        return "+".join(m.short for m in self.ordered()) or "none"


def enumerate_missing_states() -> list[MissingState]:
    """All 7 non-empty availability states, complete state first, stable order."""
    states = []
    for mask in range(7, 0, -1):
        members = frozenset(m for i, m in enumerate(MODALITIES) if mask >> i & 1)
        states.append(MissingState(members))
    return states


def validate_state(state: MissingState) -> bool:
    """True iff at least one modality is available."""
    return len(state.available) > 0


def require_valid_state(state: MissingState) -> None:
    if not validate_state(state):
        raise ValueError("invalid MissingState: no modality available")


def _require_finite(data: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(data).all()):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Spatial backbone output (C, H, W) for one sample and one modality."""

    data: torch.Tensor
    modality: Modality
    provenance: str = EXTRACTED

    def __post_init__(self) -> None:
        if self.data.dim() != 3:
            raise ValueError(f"FeatureMap data must be (C,H,W), got {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ValueError(f"FeatureMap dims must be positive, got {tuple(self.data.shape)}")
        if self.provenance not in (EXTRACTED, RECOVERED):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        _require_finite(self.data, "FeatureMap")

    @property
    def shape(self) -> tuple[int, int, int]:
        c, h, w = self.data.shape
        return c, h, w


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Pooled final descriptor; dimension is identical across all missing states."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.dim() != 1:
            raise ValueError(f"EmbeddingVector must be 1-d, got {tuple(self.data.shape)}")
        _require_finite(self.data, "EmbeddingVector")

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])

    @property
    def l2norm(self) -> float:
        return float(torch.linalg.vector_norm(self.data))


@dataclass(frozen=True, eq=False)
class SampleTriplet:
    """Aligned multi-modality images plus identity/camera labels.

    ``images`` holds exactly the modalities in ``missing.available``.
    """

    images: Mapping[Modality, torch.Tensor]
    identity: int
    camera: int
    missing: MissingState

    def __post_init__(self) -> None:
        require_valid_state(self.missing)
        if frozenset(self.images.keys()) != self.missing.available:
            raise ValueError(
                f"images present for {sorted(self.images)} but state says "
                f"{sorted(self.missing.available)}"
            )
        if self.identity < 0:
            raise ValueError("identity label must be >= 0")


class EnhancementMode(str, Enum):
    DYNAMIC = "dynamic"
    FIXED = "fixed"
    SINGLE_DIRECTION = "single-direction"
    NONE = "none"


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, Modality):
        return value.short
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


# One line of documentation per config key; emitted into config files and
# checked complete by the test suite.
_KEY_DOCS: dict[str, str] = {
    "seed": "master RNG seed for data generation, sampling and training",
    "image_height": "input image height in pixels",
    "image_width": "input image width in pixels",
    "rgb_channels": "channel count of RGB images (3)",
    "nir_channels": "channel count of NIR images (1 or 3)",
    "tir_channels": "channel count of TIR images (1 or 3)",
    "backbone_widths": "comma list of conv block widths; one stride-2 block per entry",
    "attention_position": "where the attention layer sits: final | per_block",
    "attention_reduction": "bottleneck ratio of the channel-attention MLP",
    "spatial_kernel": "kernel size of the spatial-attention conv (odd)",
    "dem_reduction": "channel reduction ratio r of the enhancement 1x1 convs",
    "dem_softmax": "normalize enhancement affinity over source positions (off = verbatim)",
    "embed_dim": "output dimension of the twin projection heads",
    "margin": "triplet loss margin alpha (> 0)",
    "smoothing": "label smoothing weight beta in [0, 1)",
    "rho": "weight of the reconstruction loss (>= 0)",
    "mu": "weight of the similarity loss (>= 0)",
    "lr": "initial SGD learning rate",
    "momentum": "SGD momentum",
    "weight_decay": "SGD weight decay",
    "epochs": "number of training epochs",
    "lr_milestones": "epochs at which lr is multiplied by lr_gamma, or 'auto' to scale the 30/55-of-60 reference schedule",
    "lr_gamma": "multiplicative lr decay at each milestone",
    "batch_p": "identities per batch (P)",
    "batch_k": "samples per identity per batch (K); batch size = P*K",
    "dropout": "dropout probability before the classifier (training only)",
    "eta": "test-time missing rate in [0, 1] for simulated removals",
    "enhancement_mode": "dynamic | fixed | single-direction | none",
    "recon_reduction": "reconstruction loss scaling: mean | sum",
    "cmft_detach_source": "stop transformation-loss gradients at the encoder features",
    "recovery_priority": "comma list; source preference when several modalities could recover a missing one",
    "use_l_rec": "include the reconstruction loss term",
    "use_l_sim": "include the similarity loss term",
    "use_dem": "enable the enhancement graph (false forces mode none)",
    "aux_branch_loss": "add per-branch triplet+CE heads on the pooled branch features",
    "deterministic": "pin torch to one thread for bit-identical runs",
    "n_train_identities": "synthetic data: number of training identities",
    "n_test_identities": "synthetic data: number of test identities (disjoint from train)",
    "samples_per_identity": "synthetic data: samples rendered per identity",
    "n_cameras": "synthetic data: camera labels assigned round-robin",
    "noise_sigma": "synthetic data: pixel/latent noise level (>= 0)",
    "eval_max_rank": "CMC curve length K",
    "sweep_etas": "comma list of missing rates evaluated by the eta sweep",
}


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; serialized as a `key = value` text file.

    Unknown keys in a config file are an error. Every key is documented in
    ``_KEY_DOCS`` and in the README.
    """

    seed: int = 0
    image_height: int = 64
    image_width: int = 32
    rgb_channels: int = 3
    nir_channels: int = 1
    tir_channels: int = 1
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    attention_position: str = "final"
    attention_reduction: int = 8
    spatial_kernel: int = 7
    dem_reduction: int = 2
    dem_softmax: bool = False
    embed_dim: int = 128
    margin: float = 0.3
    smoothing: float = 0.1
    rho: float = 1.0
    mu: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    lr_milestones: tuple[int, ...] | str = "auto"
    lr_gamma: float = 0.1
    batch_p: int = 4
    batch_k: int = 2
    dropout: float = 0.5
    eta: float = 0.0
    enhancement_mode: EnhancementMode = EnhancementMode.DYNAMIC
    recon_reduction: str = "mean"
    cmft_detach_source: bool = True
    recovery_priority: tuple[Modality, ...] = MODALITIES
    use_l_rec: bool = True
    use_l_sim: bool = True
    use_dem: bool = True
    aux_branch_loss: bool = False
    deterministic: bool = True
    n_train_identities: int = 16
    n_test_identities: int = 8
    samples_per_identity: int = 10
    n_cameras: int = 4
    noise_sigma: float = 0.05
    eval_max_rank: int = 10
    sweep_etas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)

    def __post_init__(self) -> None:
        self.validate()

    # ---- derived quantities -------------------------------------------------

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    @property
    def feature_channels(self) -> int:
        """Per-branch pooled dimension; the last backbone width."""
        return self.backbone_widths[-1]

    @property
    def final_dim(self) -> int:
        """Dimension of the final embedding: two stacks of three pooled features."""
        return 6 * self.feature_channels

    @property
    def effective_mode(self) -> EnhancementMode:
        return self.enhancement_mode if self.use_dem else EnhancementMode.NONE

    def native_channels(self, modality: Modality) -> int:
        return {
            Modality.RGB: self.rgb_channels,
            Modality.NIR: self.nir_channels,
            Modality.TIR: self.tir_channels,
        }[modality]

    def resolved_milestones(self) -> tuple[int, ...]:
        """Milestones in epochs; 'auto' scales the 30/55-of-60 reference schedule."""
        if self.lr_milestones == "auto":
            return tuple(
                sorted({max(1, round(self.epochs * frac)) for frac in (30 / 60, 55 / 60)})
            )
        return tuple(self.lr_milestones)

    # ---- validation ---------------------------------------------------------

    def validate(self) -> None:
        if self.rho < 0 or self.mu < 0:
            raise ConfigError("rho and mu must be >= 0")
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must satisfy 0 <= beta < 1")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not self.backbone_widths:
            raise ConfigError("backbone_widths must not be empty")
        if any(w < 1 for w in self.backbone_widths):
            raise ConfigError("backbone widths must be positive")
        if self.dem_reduction < 1 or self.feature_channels % self.dem_reduction:
            raise ConfigError(
                f"dem_reduction must be >= 1 and divide the final width "
                f"{self.feature_channels}, got {self.dem_reduction}"
            )
        if self.attention_position not in ("final", "per_block"):
            raise ConfigError("attention_position must be 'final' or 'per_block'")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel must be odd")
        if self.recon_reduction not in ("mean", "sum"):
            raise ConfigError("recon_reduction must be 'mean' or 'sum'")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ConfigError("need batch_p >= 2 and batch_k >= 2 for triplet mining")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if sorted(self.recovery_priority) != sorted(MODALITIES):
            raise ConfigError("recovery_priority must list each of RGB, NIR, TIR once")
        if self.rgb_channels not in (1, 3) or self.nir_channels not in (1, 3) or \
                self.tir_channels not in (1, 3):
            raise ConfigError("image channel counts must be 1 or 3")
        if self.n_train_identities < 2 or self.n_test_identities < 2:
            raise ConfigError("need at least 2 train and 2 test identities")
        if self.samples_per_identity < 2:
            raise ConfigError("need at least 2 samples per identity")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.eval_max_rank < 1:
            raise ConfigError("eval_max_rank must be >= 1")
        if any(not 0 <= e <= 1 for e in self.sweep_etas):
            raise ConfigError("sweep_etas must lie in [0, 1]")
        if self.lr_milestones != "auto":
            if any(m < 1 for m in self.lr_milestones):
                raise ConfigError("lr milestones must be >= 1")

    # ---- (de)serialization --------------------------------------------------

    @classmethod
    def known_keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def _parse_value(cls, key: str, raw: str):
        raw = raw.strip()
        try:
            if key == "backbone_widths":
                return _parse_int_tuple(raw)
            if key == "lr_milestones":
                return "auto" if raw == "auto" else _parse_int_tuple(raw)
            if key == "sweep_etas":
                return _parse_float_tuple(raw)
            if key == "recovery_priority":
                mods = tuple(parse_modality(tok) for tok in raw.split(","))
                return mods
            if key == "enhancement_mode":
                return EnhancementMode(raw)
            if key in ("attention_position", "recon_reduction"):
                return raw
            default = getattr(cls, key)
            if isinstance(default, bool):
                return _parse_bool(raw)
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            return raw
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "RunConfig":
        known = set(cls.known_keys())
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {k: cls._parse_value(k, v) for k, v in mapping.items()}
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(read_kv_file(path))

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        known = set(self.known_keys())
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {k: self._parse_value(k, v) for k, v in overrides.items()}
        return replace(self, **values)

    def as_mapping(self) -> dict[str, str]:
        return {f.name: _fmt(getattr(self, f.name)) for f in fields(self)}

    def to_text(self, documented: bool = True) -> str:
        lines = []
        for key, value in self.as_mapping().items():
            if documented:
                lines.append(f"# {_KEY_DOCS[key]}")
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path, documented: bool = True) -> None:
        Path(path).write_text(self.to_text(documented=documented))


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Read a flat `key = value` file; comments (#) and blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def key_docs() -> Mapping[str, str]:
    return dict(_KEY_DOCS)
