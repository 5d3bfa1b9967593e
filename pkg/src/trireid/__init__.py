"""Partial multi-modality (RGB/NIR/TIR) re-identification pipeline."""

from .core import (
    EmbeddingVector,
    EnhancementMode,
    FeatureMap,
    MissingState,
    Modality,
    MODALITIES,
    RunConfig,
    SampleTriplet,
    enumerate_missing_states,
    validate_state,
)

__all__ = [
    "EmbeddingVector",
    "EnhancementMode",
    "FeatureMap",
    "MissingState",
    "Modality",
    "MODALITIES",
    "RunConfig",
    "SampleTriplet",
    "enumerate_missing_states",
    "validate_state",
]

__version__ = "0.1.0"
