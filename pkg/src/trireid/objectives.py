"""Training losses: hinge triplet with batch-hard mining, label-smoothed
cross-entropy behind a BN neck, and the weighted total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


def triplet_loss(d_ap: torch.Tensor, d_an: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinge on the positive/negative distance gap: max(d_ap - d_an + margin, 0)."""
    return torch.clamp(d_ap - d_an + margin, min=0)


def pairwise_distances(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Euclidean distances between all rows of (B, D)."""
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.T
    return d2.clamp(min=eps).sqrt()


def batch_hard_mine(
    embeddings: torch.Tensor, labels: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hardest positive and hardest negative distance per anchor.

    Requires every identity in the batch to have at least two samples and the
    batch to contain at least two identities (the PK sampler guarantees both).
    """
    if embeddings.dim() != 2 or labels.dim() != 1 or len(labels) != len(embeddings):
        raise ValueError("expected (B, D) embeddings and (B,) labels")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise ValueError("every identity in the batch needs >= 2 samples")
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("batch contains a single identity; no negatives to mine")
    dist = pairwise_distances(embeddings)
    big = torch.finfo(dist.dtype).max
    d_ap = torch.where(pos_mask, dist, torch.zeros_like(dist)).amax(dim=1)
    d_an = torch.where(neg_mask, dist, torch.full_like(dist, big)).amin(dim=1)
    return d_ap, d_an


def batch_hard_triplet(
    embeddings: torch.Tensor, labels: torch.Tensor, margin: float
) -> torch.Tensor:
    d_ap, d_an = batch_hard_mine(embeddings, labels)
    return triplet_loss(d_ap, d_an, margin).mean()


def smoothed_ce(logits: torch.Tensor, target: int, beta: float, n_classes: int) -> torch.Tensor:
    """Cross-entropy against the smoothed target: (1-beta) on the true class
    plus beta/N spread over every class (true class included)."""
    if not 0 <= beta < 1:
        raise ValueError("beta must satisfy 0 <= beta < 1")
    if not 0 <= target < n_classes:
        raise ValueError(f"target {target} outside [0, {n_classes})")
    if logits.shape != (n_classes,):
        raise ValueError(f"expected ({n_classes},) logits, got {tuple(logits.shape)}")
    log_probs = F.log_softmax(logits, dim=0)
    return -(1 - beta) * log_probs[target] - (beta / n_classes) * log_probs.sum()


def smoothed_ce_batch(
    logits: torch.Tensor, targets: torch.Tensor, beta: float
) -> torch.Tensor:
    """Batch mean of :func:`smoothed_ce` on (B, N) logits."""
    n_classes = logits.shape[1]
    log_probs = F.log_softmax(logits, dim=1)
    nll = -log_probs.gather(1, targets[:, None]).squeeze(1)
    return ((1 - beta) * nll - (beta / n_classes) * log_probs.sum(dim=1)).mean()


@dataclass(frozen=True)
class LossReport:
    """Per-batch loss means; total = l_tri + l_ce + rho*l_rec + mu*l_sim."""

    l_tri: float
    l_ce: float
    l_rec: float
    l_sim: float
    total: float

    CSV_FIELDS = ("l_tri", "l_ce", "l_rec", "l_sim", "total")

    def __post_init__(self) -> None:
        for name in self.CSV_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise RuntimeError(f"non-finite loss component {name}: {self}")

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, n):.8g}" for n in self.CSV_FIELDS)


def total_loss(
    l_tri: float | torch.Tensor,
    l_ce: float | torch.Tensor,
    l_rec: float | torch.Tensor,
    l_sim: float | torch.Tensor,
    rho: float,
    mu: float,
) -> LossReport:
    """Combine the parts per the training objective and validate finiteness."""
    parts = [
        float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        for v in (l_tri, l_ce, l_rec, l_sim)
    ]
    if any(not math.isfinite(p) for p in parts):
        raise RuntimeError(
            "non-finite loss part: "
            + ", ".join(f"{n}={v}" for n, v in zip(("l_tri", "l_ce", "l_rec", "l_sim"), parts))
        )
    l_tri_f, l_ce_f, l_rec_f, l_sim_f = parts
    return LossReport(
        l_tri=l_tri_f,
        l_ce=l_ce_f,
        l_rec=l_rec_f,
        l_sim=l_sim_f,
        total=l_tri_f + l_ce_f + rho * l_rec_f + mu * l_sim_f,
    )


class ClassifierHead(nn.Module):
    """BN neck: triplet consumes the raw embedding, the classifier sees the
    batch-normalized one. Dropout is active only in training mode."""

    def __init__(self, feat_dim: int, n_classes: int, dropout: float = 0.5):
        super().__init__()
        self.bn = nn.BatchNorm1d(feat_dim)
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(feat_dim, n_classes, bias=False)
        self.n_classes = n_classes

    def neck(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.bn(embeddings)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.fc(self.drop(self.neck(embeddings)))
