"""Cross-modality feature transformation: recover a missing modality's feature.

Each ordered (source, target) pair owns an up-sample path (feature -> fake
target image) and a down-sample path (fake image -> recovered feature). All
six pairs are trained jointly on complete data and frozen afterwards.
"""

from __future__ import annotations

from typing import Iterator, Mapping

import torch
from torch import nn

from .core import (
    MODALITIES,
    RECOVERED,
    ConfigError,
    FeatureMap,
    MissingState,
    Modality,
    RunConfig,
    require_valid_state,
)
from .encoder import gap


def _up_stage(c_in: int, c_out: int) -> nn.Sequential:
    # kernel 4 / stride 2 / pad 1 doubles the spatial size exactly
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def _down_stage(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def pair_key(source: Modality, target: Modality) -> str:
    return f"{source.short}2{target.short}"


class CmftPair(nn.Module):
    """One directed transformation source -> target.

    The up-sample block doubles the spatial size once per encoder stage, so the
    image size must be feature size * 2**len(widths).
    """

    def __init__(
        self,
        source: Modality,
        target: Modality,
        widths: tuple[int, ...],
        image_size: tuple[int, int],
        target_channels: int,
    ):
        super().__init__()
        if source == target:
            raise ConfigError("a transformation pair needs distinct modalities")
        h, w = image_size
        factor = 2 ** len(widths)
        if h % factor or w % factor:
            raise ConfigError(
                f"image size {image_size} must be divisible by 2**{len(widths)}"
            )
        self.source = source
        self.target = target
        self.calls = 0  # diagnostic transform counter, not persisted

        feat_c = widths[-1]
        up_widths = list(reversed(widths))[1:] + [widths[0]]
        stages: list[nn.Module] = []
        c = feat_c
        for c_out in up_widths:
            stages.append(_up_stage(c, c_out))
            c = c_out
        stages.append(nn.Conv2d(c, target_channels, kernel_size=3, padding=1))
        self.up = nn.Sequential(*stages)

        downs: list[nn.Module] = []
        c = target_channels
        for c_out in widths:
            downs.append(_down_stage(c, c_out))
            c = c_out
        self.down = nn.Sequential(*downs)

    def forward(self, f_src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, h, w) -> fake image (B, c_img, H, W) and recovered (B, C, h, w)."""
        fake = (torch.tanh(self.up(f_src)) + 1) / 2  # image range [0, 1]
        rec = self.down(fake)
        return fake, rec

    @classmethod
    def from_config(cls, source: Modality, target: Modality, config: RunConfig) -> "CmftPair":
        return cls(
            source,
            target,
            widths=config.backbone_widths,
            image_size=(config.image_height, config.image_width),
            target_channels=config.native_channels(target),
        )


def transform(pair: CmftPair, f_src: FeatureMap) -> tuple[torch.Tensor, FeatureMap]:
    """Recover the pair's target feature from one source FeatureMap."""
    if f_src.modality != pair.source:
        raise ValueError(
            f"pair {pair.source.name}->{pair.target.name} fed a "
            f"{f_src.modality.name} feature"
        )
    pair.calls += 1
    fake, rec = pair(f_src.data.unsqueeze(0))
    return fake.squeeze(0), FeatureMap(rec.squeeze(0), pair.target, RECOVERED)


def reconstruction_loss(
    fake: torch.Tensor, real: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Squared L2 between fake and real images.

    `mean` scales by the pixel count so the weight rho stays balanced across
    image sizes; `sum` is the unnormalized form. Batched inputs average over
    the batch.
    """
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch: fake {tuple(fake.shape)} vs real {tuple(real.shape)}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff2 = (real - fake) ** 2
    if fake.dim() == 3:
        return diff2.mean() if reduction == "mean" else diff2.sum()
    per_sample = diff2.flatten(1).mean(dim=1) if reduction == "mean" else diff2.flatten(1).sum(dim=1)
    return per_sample.mean()


def _projection(in_dim: int, embed_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, embed_dim),
        nn.BatchNorm1d(embed_dim),
        nn.ReLU(inplace=True),
    )


class ProjectionHead(nn.Module):
    """Twin linear+BN+ReLU maps embedding real and recovered pooled features.

    `real` and `recovered` never share parameters. The BN layers need batches
    of at least two samples in training mode.
    """

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.real = _projection(in_dim, embed_dim)
        self.recovered = _projection(in_dim, embed_dim)
        self.embed_dim = embed_dim


def l1_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum of absolute differences; batched inputs average over the batch."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).abs()
    if diff.dim() == 1:
        return diff.sum()
    return diff.flatten(1).sum(dim=1).mean()


def similarity_loss(head: ProjectionHead, f_real: FeatureMap, f_rec: FeatureMap) -> torch.Tensor:
    """L1 between the projected pooled real feature and the projected recovered one."""
    if f_real.shape != f_rec.shape:
        raise ValueError("real and recovered features must share a shape")
    real_emb = head.real(gap(f_real.data).unsqueeze(0)).squeeze(0)
    rec_emb = head.recovered(gap(f_rec.data).unsqueeze(0)).squeeze(0)
    return l1_distance(real_emb, rec_emb)


def similarity_loss_batch(
    head: ProjectionHead, real_feats: torch.Tensor, rec_feats: torch.Tensor
) -> torch.Tensor:
    """Batched form of :func:`similarity_loss` on (B, C, H, W) feature tensors."""
    if real_feats.shape != rec_feats.shape:
        raise ValueError("real and recovered features must share a shape")
    return l1_distance(head.real(gap(real_feats)), head.recovered(gap(rec_feats)))


class CmftBank(nn.Module):
    """All six ordered transformation pairs plus a per-target projection head."""

    def __init__(
        self,
        widths: tuple[int, ...],
        image_size: tuple[int, int],
        native_channels: Mapping[Modality, int],
        embed_dim: int,
    ):
        super().__init__()
        self.pairs = nn.ModuleDict(
            {
                pair_key(s, t): CmftPair(s, t, widths, image_size, native_channels[t])
                for s in MODALITIES
                for t in MODALITIES
                if s != t
            }
        )
        self.heads = nn.ModuleDict(
            {m.short: ProjectionHead(widths[-1], embed_dim) for m in MODALITIES}
        )

    @classmethod
    def from_config(cls, config: RunConfig) -> "CmftBank":
        return cls(
            widths=config.backbone_widths,
            image_size=(config.image_height, config.image_width),
            native_channels={m: config.native_channels(m) for m in MODALITIES},
            embed_dim=config.embed_dim,
        )

    def pair(self, source: Modality, target: Modality) -> CmftPair:
        return self.pairs[pair_key(source, target)]

    def head(self, target: Modality) -> ProjectionHead:
        return self.heads[target.short]

    def all_pairs(self) -> Iterator[CmftPair]:
        for s in MODALITIES:
            for t in MODALITIES:
                if s != t:
                    yield self.pair(s, t)

    @property
    def transform_calls(self) -> int:
        return sum(p.calls for p in self.all_pairs())

    def reset_counters(self) -> None:
        for p in self.all_pairs():
            p.calls = 0


def recover_missing(
    state: MissingState,
    features: Mapping[Modality, FeatureMap],
    bank: CmftBank,
    priority: tuple[Modality, ...] = MODALITIES,
) -> dict[Modality, FeatureMap]:
    """Fill in features for every modality; missing ones come from the
    highest-priority available source's transformation pair."""
    require_valid_state(state)
    if frozenset(features.keys()) != state.available:
        raise ValueError(
            f"features cover {sorted(features)} but state says {sorted(state.available)}"
        )
    out = dict(features)
    if state.is_complete:
        return out
    source = next(m for m in priority if m in state.available)
    for target in sorted(state.missing):
        _, rec = transform(bank.pair(source, target), features[source])
        out[target] = rec
    return out
