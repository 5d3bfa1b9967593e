"""Retrieval evaluation: distance matrix, per-query rankings, mAP and CMC.

Protocol notes: gallery entries sharing both identity and camera with the
query are junk and removed from the ranking; queries with no good match are
excluded from mAP/CMC but counted in the report. Equal distances break ties
by ascending gallery index (stable sort).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between (Q, D) and (G, D) embeddings."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {g.shape}")
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.clip(d2, 0.0, None))


def average_precision(ranking: np.ndarray, good: np.ndarray) -> float:
    """Mean over good items of the precision at their rank.

    `ranking` lists gallery indices best-first (junk already removed); `good`
    is a boolean mask over gallery indices.
    """
    good_in_order = np.asarray(good)[np.asarray(ranking)]
    n_good = int(good_in_order.sum())
    if n_good == 0:
        raise ValueError("average_precision needs at least one good gallery item")
    hits = np.flatnonzero(good_in_order)
    precisions = (np.arange(1, n_good + 1)) / (hits + 1.0)
    return float(precisions.mean())


def cmc_curve(
    rankings: Sequence[np.ndarray], good_masks: Sequence[np.ndarray], k: int
) -> np.ndarray:
    """cmc[r] = fraction of queries with a good item within the top r+1."""
    if len(rankings) != len(good_masks):
        raise ValueError("one good mask per ranking required")
    hits = np.zeros(k, dtype=np.float64)
    for ranking, good in zip(rankings, good_masks):
        flags = np.asarray(good)[np.asarray(ranking)[:k]]
        first = np.flatnonzero(flags)
        if first.size:
            hits[first[0] :] += 1
    return hits / max(len(rankings), 1)


@dataclass(frozen=True)
class RankingResult:
    """Junk-filtered rankings plus good masks for a whole query set."""

    orders: tuple[np.ndarray, ...]       # per kept query: gallery indices best-first
    good_masks: tuple[np.ndarray, ...]   # per kept query: bool over gallery indices
    skipped: int                         # queries with zero good items


def rank_queries(
    dist: np.ndarray,
    q_ids: np.ndarray,
    q_cams: np.ndarray,
    g_ids: np.ndarray,
    g_cams: np.ndarray,
) -> RankingResult:
    orders = []
    masks = []
    skipped = 0
    for qi in range(dist.shape[0]):
        order = np.argsort(dist[qi], kind="stable")
        junk = (g_ids == q_ids[qi]) & (g_cams == q_cams[qi])
        order = order[~junk[order]]
        good = (g_ids == q_ids[qi]) & ~junk
        if not good.any():
            skipped += 1
            continue
        orders.append(order)
        masks.append(good)
    return RankingResult(tuple(orders), tuple(masks), skipped)


def evaluate_retrieval(
    q_emb: np.ndarray,
    q_ids: np.ndarray,
    q_cams: np.ndarray,
    g_emb: np.ndarray,
    g_ids: np.ndarray,
    g_cams: np.ndarray,
    max_rank: int = 10,
) -> tuple[float, np.ndarray, int]:
    """Full evaluator: returns (mAP, cmc[1..max_rank], skipped queries)."""
    dist = distance_matrix(q_emb, g_emb)
    ranked = rank_queries(dist, np.asarray(q_ids), np.asarray(q_cams),
                          np.asarray(g_ids), np.asarray(g_cams))
    if not ranked.orders:
        raise ValueError("no query has a good gallery match")
    aps = [average_precision(o, g) for o, g in zip(ranked.orders, ranked.good_masks)]
    cmc = cmc_curve(ranked.orders, ranked.good_masks, max_rank)
    return float(np.mean(aps)), cmc, ranked.skipped


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate retrieval metrics for one evaluation scenario."""

    scenario: str
    map: float
    cmc: tuple[float, ...]
    n_query: int
    n_gallery: int
    n_skipped: int
    enhancement_mode: str
    eta: float
    checkpoint_sha256: str
    config: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.map <= 1:
            raise ValueError(f"mAP out of range: {self.map}")
        if any(not 0 <= c <= 1 for c in self.cmc):
            raise ValueError("CMC values must lie in [0, 1]")
        if any(b > a for a, b in zip(self.cmc[1:], self.cmc)):
            raise ValueError("CMC must be non-decreasing in rank")

    def rank(self, k: int) -> float:
        return self.cmc[k - 1] if k - 1 < len(self.cmc) else self.cmc[-1]

    def to_text(self) -> str:
        lines = [
            f"scenario = {self.scenario}",
            f"map = {self.map:.6f}",
            f"rank1 = {self.rank(1):.6f}",
            f"rank5 = {self.rank(5):.6f}",
            f"rank10 = {self.rank(10):.6f}",
            "cmc = " + ",".join(f"{c:.6f}" for c in self.cmc),
            f"n_query = {self.n_query}",
            f"n_gallery = {self.n_gallery}",
            f"n_skipped = {self.n_skipped}",
            f"enhancement_mode = {self.enhancement_mode}",
            f"eta = {self.eta}",
            f"checkpoint_sha256 = {self.checkpoint_sha256}",
        ]
        for key in sorted(self.config):
            lines.append(f"config.{key} = {self.config[key]}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def write_cmc_points(self, path: str | Path) -> None:
        lines = ["rank,cmc"] + [f"{i + 1},{c:.6f}" for i, c in enumerate(self.cmc)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv: dict[str, str] = {}
        config: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key.startswith("config."):
                config[key[len("config.") :]] = value
            else:
                kv[key] = value
        return cls(
            scenario=kv["scenario"],
            map=float(kv["map"]),
            cmc=tuple(float(v) for v in kv["cmc"].split(",")),
            n_query=int(kv["n_query"]),
            n_gallery=int(kv["n_gallery"]),
            n_skipped=int(kv["n_skipped"]),
            enhancement_mode=kv["enhancement_mode"],
            eta=float(kv["eta"]),
            checkpoint_sha256=kv["checkpoint_sha256"],
            config=config,
        )

    @classmethod
    def read(cls, path: str | Path) -> "MetricsReport":
        return cls.from_text(Path(path).read_text())
