"""Per-modality convolutional feature extractors with channel/spatial attention.

The three branches share one architecture but never share parameters.
"""

from __future__ import annotations

import torch
from torch import nn

from .core import EXTRACTED, ConfigError, FeatureMap, Modality, RunConfig


def replicate_channels(image: torch.Tensor, channels: int) -> torch.Tensor:
    """Repeat a single-channel image to `channels`; pass matching inputs through."""
    c = image.shape[-3]
    if c == channels:
        return image
    if c == 1:
        reps = [1] * image.dim()
        reps[-3] = channels
        return image.repeat(*reps)
    raise ConfigError(f"cannot adapt a {c}-channel image to {channels} channels")


class ChannelGate(nn.Module):
    """Sigmoid channel weights from avg- and max-pooled descriptors through a shared MLP."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        gate = torch.sigmoid(self.mlp(avg) + self.mlp(mx))  # (B, C), in (0,1)
        return gate[:, :, None, None]


class SpatialGate(nn.Module):
    """Sigmoid spatial weights from channel-mean/max maps through one conv."""

    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(desc))  # (B, 1, H, W), in (0,1)


class AttentionBlock(nn.Module):
    """Channel gate then spatial gate, both multiplicative; shape preserved."""

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        self.channel_gate = ChannelGate(channels, reduction)
        self.spatial_gate = SpatialGate(spatial_kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.channel_gate(x)
        x = x * self.spatial_gate(x)
        return x


def apply_attention(block: AttentionBlock, f: FeatureMap) -> FeatureMap:
    out = block(f.data.unsqueeze(0)).squeeze(0)
    return FeatureMap(out, f.modality, f.provenance)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class BranchEncoder(nn.Module):
    """Stack of stride-2 conv blocks plus attention for one modality.

    Spatial size shrinks by 2 per block (ceil division); output channels are
    the last configured width.
    """

    def __init__(
        self,
        modality: Modality,
        in_channels: int = 3,
        widths: tuple[int, ...] = (32, 64, 128, 256),
        attention_position: str = "final",
        attention_reduction: int = 8,
        spatial_kernel: int = 7,
    ):
        super().__init__()
        if attention_position not in ("final", "per_block"):
            raise ConfigError(f"unknown attention_position {attention_position!r}")
        self.modality = modality
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.attention_position = attention_position
        blocks = []
        c = in_channels
        for w in widths:
            blocks.append(_conv_block(c, w))
            if attention_position == "per_block":
                blocks.append(AttentionBlock(w, attention_reduction, spatial_kernel))
            c = w
        if attention_position == "final":
            blocks.append(AttentionBlock(c, attention_reduction, spatial_kernel))
        self.body = nn.Sequential(*blocks)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        for _ in self.widths:
            height = (height + 1) // 2
            width = (width + 1) // 2
        return height, width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    @classmethod
    def from_config(cls, modality: Modality, config: RunConfig) -> "BranchEncoder":
        return cls(
            modality,
            in_channels=3,
            widths=config.backbone_widths,
            attention_position=config.attention_position,
            attention_reduction=config.attention_reduction,
            spatial_kernel=config.spatial_kernel,
        )


def extract(branch: BranchEncoder, image: torch.Tensor) -> FeatureMap:
    """Run one image (C_img, H, W) through its modality branch."""
    if image.dim() != 3:
        raise ConfigError(f"expected a (C,H,W) image, got shape {tuple(image.shape)}")
    x = replicate_channels(image, branch.in_channels)
    out = branch(x.unsqueeze(0)).squeeze(0)
    h, w = branch.output_size(image.shape[1], image.shape[2])
    if out.shape != (branch.out_channels, h, w):
        raise ConfigError(
            f"backbone produced {tuple(out.shape)}, expected {(branch.out_channels, h, w)}"
        )
    return FeatureMap(out, branch.modality, EXTRACTED)


def gap(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (..., C, H, W) -> (..., C)."""
    return x.mean(dim=(-2, -1))


def global_average_pool(f: FeatureMap) -> torch.Tensor:
    return gap(f.data)
