"""Directed enhancement graph over the three modality nodes.

Every ordered pair of modalities owns an edge that enhances the target
feature with position-wise affinities against the source feature. Edges
sourced at a missing modality are cut at test time (dynamic mode); fixed and
single-direction modes reproduce the ablation baselines.
"""

from __future__ import annotations

from typing import Mapping

import torch
from torch import nn

from .core import (
    MODALITIES,
    ConfigError,
    EmbeddingVector,
    EnhancementMode,
    FeatureMap,
    MissingState,
    Modality,
    RunConfig,
    require_valid_state,
)
from .encoder import gap

Edge = tuple[Modality, Modality]

_ALL_EDGES: tuple[Edge, ...] = tuple(
    (s, t) for s in MODALITIES for t in MODALITIES if s != t
)
_FIXED_EDGES: frozenset[Edge] = frozenset(
    {(Modality.RGB, Modality.NIR), (Modality.RGB, Modality.TIR)}
)
_CYCLE_EDGES: frozenset[Edge] = frozenset(
    {
        (Modality.RGB, Modality.NIR),
        (Modality.NIR, Modality.TIR),
        (Modality.TIR, Modality.RGB),
    }
)


def _edge_key(edge: Edge) -> str:
    return f"{edge[0].short}_{edge[1].short}"


class EnhancementEdge(nn.Module):
    """One directed enhancement: target + proj(value_src @ (key_srcᵀ key_tgt)).

    Three 1x1 convs reduce to C' = C / reduction; the output 1x1 conv projects
    back to C. The output conv starts at zero so the edge begins as identity.
    """

    def __init__(self, source: Modality, target: Modality, channels: int,
                 reduction: int = 2, softmax: bool = False):
        super().__init__()
        if source == target:
            raise ConfigError("an enhancement edge needs distinct modalities")
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide channels {channels}")
        self.source = source
        self.target = target
        self.softmax = softmax
        reduced = channels // reduction
        self.source_key = nn.Conv2d(channels, reduced, kernel_size=1)
        self.source_value = nn.Conv2d(channels, reduced, kernel_size=1)
        self.target_key = nn.Conv2d(channels, reduced, kernel_size=1)
        self.out_proj = nn.Conv2d(reduced, channels, kernel_size=1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def residual(self, f_source: torch.Tensor, f_target: torch.Tensor) -> torch.Tensor:
        """The additive part only; both inputs (B, C, H, W)."""
        if f_source.shape != f_target.shape:
            raise ValueError(
                f"source {tuple(f_source.shape)} and target {tuple(f_target.shape)} differ"
            )
        b, _, h, w = f_source.shape
        k_src = self.source_key(f_source).flatten(2)     # (B, C', HW)
        v_src = self.source_value(f_source).flatten(2)   # (B, C', HW)
        k_tgt = self.target_key(f_target).flatten(2)     # (B, C', HW)
        affinity = k_src.transpose(1, 2) @ k_tgt         # (B, HW_src, HW_tgt)
        if self.softmax:
            affinity = affinity.softmax(dim=1)
        agg = v_src @ affinity                           # (B, C', HW_tgt)
        return self.out_proj(agg.reshape(b, -1, h, w))

    def forward(self, f_source: torch.Tensor, f_target: torch.Tensor) -> torch.Tensor:
        return f_target + self.residual(f_source, f_target)


def enhance(edge: EnhancementEdge, f_source: FeatureMap, f_target: FeatureMap) -> FeatureMap:
    """Apply one edge to a single sample's feature maps."""
    out = edge(f_source.data.unsqueeze(0), f_target.data.unsqueeze(0)).squeeze(0)
    return FeatureMap(out, f_target.modality, f_target.provenance)


class EnhancementGraph(nn.Module):
    """Complete digraph of :class:`EnhancementEdge` plus the cut rule."""

    def __init__(self, channels: int, reduction: int = 2, softmax: bool = False,
                 mode: EnhancementMode = EnhancementMode.DYNAMIC):
        super().__init__()
        self.mode = mode
        self.edges = nn.ModuleDict(
            {
                _edge_key(e): EnhancementEdge(e[0], e[1], channels, reduction, softmax)
                for e in _ALL_EDGES
            }
        )

    @classmethod
    def from_config(cls, config: RunConfig) -> "EnhancementGraph":
        return cls(
            channels=config.feature_channels,
            reduction=config.dem_reduction,
            softmax=config.dem_softmax,
            mode=config.effective_mode,
        )

    def edge(self, source: Modality, target: Modality) -> EnhancementEdge:
        return self.edges[_edge_key((source, target))]

    def cut_edges(self, state: MissingState) -> set[Edge]:
        return cut_edges(self, state)


def cut_edges(graph: EnhancementGraph, state: MissingState) -> set[Edge]:
    """Surviving edges for a missing state.

    dynamic: drop every edge whose arc tail (source) is missing.
    fixed: RGB->NIR and RGB->TIR regardless of the state.
    single-direction: the cycle RGB->NIR->TIR->RGB regardless of the state.
    none: no edges.
    """
    require_valid_state(state)
    mode = graph.mode
    if mode == EnhancementMode.DYNAMIC:
        return {(s, t) for (s, t) in _ALL_EDGES if s in state.available}
    if mode == EnhancementMode.FIXED:
        return set(_FIXED_EDGES)
    if mode == EnhancementMode.SINGLE_DIRECTION:
        return set(_CYCLE_EDGES)
    if mode == EnhancementMode.NONE:
        return set()
    raise ConfigError(f"unknown enhancement mode {mode!r}")


def compose_final_batch(
    state: MissingState,
    features: Mapping[Modality, torch.Tensor],
    graph: EnhancementGraph,
) -> torch.Tensor:
    """Build (B, 6C) final embeddings for a batch that shares one missing state.

    First stack: pooled enhanced feature of every node, each target receiving
    the sum of its surviving in-edge residuals. Second stack: pooled raw
    feature where available, pooled enhanced recovered feature where not.
    """
    require_valid_state(state)
    if frozenset(features.keys()) != frozenset(MODALITIES):
        raise ValueError("compose expects features for all three modalities")
    surviving = cut_edges(graph, state)

    enhanced_pooled: dict[Modality, torch.Tensor] = {}
    for target in MODALITIES:
        out = features[target]
        for source, tgt in surviving:
            if tgt == target:
                out = out + graph.edge(source, tgt).residual(features[source], features[target])
        enhanced_pooled[target] = gap(out)

    mixed_pooled = [
        gap(features[m]) if m in state.available else enhanced_pooled[m]
        for m in MODALITIES
    ]
    stacks = [enhanced_pooled[m] for m in MODALITIES] + mixed_pooled
    return torch.cat(stacks, dim=1)


def compose_final(
    state: MissingState,
    raw: Mapping[Modality, FeatureMap],
    graph: EnhancementGraph,
) -> EmbeddingVector:
    """Single-sample composition; `raw` must cover all three modalities."""
    batched = {m: fm.data.unsqueeze(0) for m, fm in raw.items()}
    out = compose_final_batch(state, batched, graph).squeeze(0)
    return EmbeddingVector(out)
