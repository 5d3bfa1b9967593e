"""Synthetic tri-modality dataset generation, on-disk loading, PK batch
sampling, and missing-state simulation.

On-disk layout mirrors common Re-ID conventions so real tri-modality data can
be dropped in:  <root>/<split>/<modality>/<identity>_<camera>_<seq>.png
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .core import (
    MODALITIES,
    ConfigError,
    MissingState,
    Modality,
    RunConfig,
    SampleTriplet,
    parse_modality,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the synthetic stand-in dataset.

    Each identity owns a latent code; the three modalities are distinct fixed
    sinusoidal renderings of that code. Cameras shift brightness/contrast and
    ``noise_sigma`` scales both per-sample latent jitter and pixel noise, so a
    zero sigma makes every image a pure function of (identity, camera).
    """

    n_train_identities: int = 16
    n_test_identities: int = 8
    samples_per_identity: int = 10
    image_height: int = 64
    image_width: int = 32
    n_cameras: int = 4
    noise_sigma: float = 0.05
    latent_dim: int = 8
    seed: int = 0
    channels: dict[Modality, int] = field(
        default_factory=lambda: {Modality.RGB: 3, Modality.NIR: 1, Modality.TIR: 1}
    )

    def __post_init__(self) -> None:
        if self.n_train_identities + self.n_test_identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.n_train_identities < 2 or self.n_test_identities < 2:
            raise ConfigError("need at least 2 train and 2 test identities")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.samples_per_identity < 2:
            raise ConfigError("need at least 2 samples per identity")
        if self.n_cameras < 2:
            raise ConfigError("need at least 2 cameras for the junk rule")

    @classmethod
    def from_config(cls, config: RunConfig) -> "SyntheticSpec":
        return cls(
            n_train_identities=config.n_train_identities,
            n_test_identities=config.n_test_identities,
            samples_per_identity=config.samples_per_identity,
            image_height=config.image_height,
            image_width=config.image_width,
            n_cameras=config.n_cameras,
            noise_sigma=config.noise_sigma,
            seed=config.seed,
            channels={
                Modality.RGB: config.rgb_channels,
                Modality.NIR: config.nir_channels,
                Modality.TIR: config.tir_channels,
            },
        )


@dataclass(frozen=True)
class DatasetRecord:
    """One sample: per-modality file paths plus labels and availability."""

    identity: int
    camera: int
    seq: int
    split: str
    files: dict[Modality, str]  # relative to the dataset root

    @property
    def available(self) -> frozenset[Modality]:
        return frozenset(self.files.keys())

    @property
    def state(self) -> MissingState:
        return MissingState(self.available)


@dataclass(frozen=True)
class DatasetIndex:
    """All records of one dataset plus its root directory."""

    root: Path
    records: tuple[DatasetRecord, ...]

    def split(self, name: str) -> tuple[DatasetRecord, ...]:
        return tuple(r for r in self.records if r.split == name)

    @property
    def train(self) -> tuple[DatasetRecord, ...]:
        return self.split("train")

    @property
    def query(self) -> tuple[DatasetRecord, ...]:
        return self.split("query")

    @property
    def gallery(self) -> tuple[DatasetRecord, ...]:
        return self.split("gallery")

    @property
    def test_records(self) -> tuple[DatasetRecord, ...]:
        return tuple(r for r in self.records if r.split in ("query", "gallery"))

    def identities(self, *splits: str) -> set[int]:
        wanted = splits or SPLITS
        return {r.identity for r in self.records if r.split in wanted}

    def validate(self, check_files: bool = True) -> None:
        train_ids = self.identities("train")
        test_ids = self.identities("query", "gallery")
        overlap = train_ids & test_ids
        if overlap:
            raise ValueError(f"train/test identities overlap: {sorted(overlap)}")
        for rec in self.records:
            if not rec.files:
                raise ValueError(f"record {rec.identity}/{rec.seq} has no modalities")
            if rec.split not in SPLITS:
                raise ValueError(f"unknown split {rec.split!r}")
            if check_files:
                for rel in rec.files.values():
                    if not (self.root / rel).exists():
                        raise ValueError(f"missing file: {self.root / rel}")


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _render_bases(spec: SyntheticSpec, rng: np.random.Generator) -> dict[Modality, np.ndarray]:
    """Per-modality sinusoidal basis stacks of shape (channels, latent, H, W)."""
    ys = np.linspace(0.0, 1.0, spec.image_height, endpoint=False)
    xs = np.linspace(0.0, 1.0, spec.image_width, endpoint=False)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    bases = {}
    for m in MODALITIES:
        c = spec.channels[m]
        freq = rng.uniform(0.5, 3.0, size=(c, spec.latent_dim, 2))
        phase = rng.uniform(0, 2 * np.pi, size=(c, spec.latent_dim))
        stack = np.sin(
            2 * np.pi * (freq[..., 0, None, None] * yy + freq[..., 1, None, None] * xx)
            + phase[..., None, None]
        )
        bases[m] = stack.astype(np.float64)
    return bases


def _render_image(
    base: np.ndarray, z: np.ndarray, camera: int, n_cameras: int,
    sigma: float, rng: np.random.Generator,
) -> np.ndarray:
    """(channels, latent, H, W) basis + latent -> uint8 image (channels, H, W)."""
    raw = np.tensordot(z, base, axes=(0, 1)) / np.sqrt(len(z))  # (C, H, W)
    img = (np.tanh(raw) + 1) / 2
    t = camera / max(n_cameras - 1, 1)
    img = 0.5 + (img - 0.5) * (0.9 + 0.2 * t) + (t - 0.5) * 0.2
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(path)


def generate_synthetic(spec: SyntheticSpec, root: str | Path) -> DatasetIndex:
    """Render the dataset to `root` and write its manifest. Fully seeded:
    the same spec produces bit-identical files."""
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    bases = _render_bases(spec, rng)
    n_total = spec.n_train_identities + spec.n_test_identities
    latents = rng.normal(0.0, 1.0, size=(n_total, spec.latent_dim))

    records = []
    for identity in range(n_total):
        is_train = identity < spec.n_train_identities
        for seq in range(spec.samples_per_identity):
            camera = seq % spec.n_cameras
            if is_train:
                split = "train"
            else:
                split = "query" if seq % 3 == 0 else "gallery"
            z = latents[identity] + spec.noise_sigma * rng.normal(0.0, 1.0, spec.latent_dim)
            files = {}
            for m in MODALITIES:
                img = _render_image(
                    bases[m], z, camera, spec.n_cameras, spec.noise_sigma, rng
                )
                rel = f"{split}/{m.short}/{identity:04d}_{camera}_{seq:03d}.png"
                _save_png(img, root / rel)
                files[m] = rel
            records.append(DatasetRecord(identity, camera, seq, split, files))

    index = DatasetIndex(root=root, records=tuple(records))
    index.validate()
    save_manifest(index)
    return index


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------


def save_manifest(index: DatasetIndex) -> Path:
    payload = {
        "version": MANIFEST_VERSION,
        "records": [
            {
                "identity": r.identity,
                "camera": r.camera,
                "seq": r.seq,
                "split": r.split,
                "files": {m.short: rel for m, rel in sorted(r.files.items())},
            }
            for r in index.records
        ],
    }
    path = index.root / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_index(root: str | Path, check_files: bool = True) -> DatasetIndex:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    payload = json.loads(path.read_text())
    if payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {payload.get('version')!r}")
    records = tuple(
        DatasetRecord(
            identity=entry["identity"],
            camera=entry["camera"],
            seq=entry["seq"],
            split=entry["split"],
            files={parse_modality(k): v for k, v in entry["files"].items()},
        )
        for entry in payload["records"]
    )
    index = DatasetIndex(root=root, records=records)
    index.validate(check_files=check_files)
    return index


def load_image(path: Path) -> torch.Tensor:
    """PNG -> float tensor in [0, 1], shape (C, H, W)."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = np.moveaxis(arr, 2, 0)
    return torch.from_numpy(arr.copy())


def load_triplet(index: DatasetIndex, record: DatasetRecord) -> SampleTriplet:
    images = {m: load_image(index.root / rel) for m, rel in record.files.items()}
    return SampleTriplet(
        images=images,
        identity=record.identity,
        camera=record.camera,
        missing=record.state,
    )


# ---------------------------------------------------------------------------
# missing-state manipulation (test splits only)
# ---------------------------------------------------------------------------


def max_feasible_removals(records: Sequence[DatasetRecord]) -> int:
    return sum(len(r.files) - 1 for r in records)


def simulate_missing(index: DatasetIndex, eta: float, seed: int) -> DatasetIndex:
    """Remove round(eta * N) modality-images from the query+gallery records.

    N counts modality-images (not samples). Every sample keeps at least one
    modality; the train split is untouched; deterministic under `seed`.
    """
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    test = [r for r in index.records if r.split in ("query", "gallery")]
    n_images = sum(len(r.files) for r in test)
    n_remove = round(eta * n_images)
    feasible = max_feasible_removals(test)
    if n_remove > feasible:
        raise ValueError(
            f"eta={eta} asks for {n_remove} removals but only {feasible} are "
            f"possible while keeping one modality per sample "
            f"(max feasible eta = {feasible / n_images:.6f})"
        )
    candidates = [
        (i, m) for i, r in enumerate(index.records) if r.split in ("query", "gallery")
        for m in sorted(r.files)
    ]
    rng = np.random.default_rng(seed)
    rng.shuffle(candidates)

    removed: dict[int, set[Modality]] = {}
    remaining = {i: len(index.records[i].files) for i, _ in candidates}
    count = 0
    for i, m in candidates:
        if count == n_remove:
            break
        if remaining[i] > 1:
            removed.setdefault(i, set()).add(m)
            remaining[i] -= 1
            count += 1

    new_records = []
    for i, rec in enumerate(index.records):
        gone = removed.get(i)
        if not gone:
            new_records.append(rec)
        else:
            files = {m: rel for m, rel in rec.files.items() if m not in gone}
            new_records.append(replace(rec, files=files))
    return DatasetIndex(root=index.root, records=tuple(new_records))


def fixed_missing(index: DatasetIndex, modalities: frozenset[Modality] | set[Modality]) -> DatasetIndex:
    """Drop exactly the named modalities from every query+gallery record."""
    modalities = frozenset(modalities)
    if modalities == frozenset(MODALITIES):
        raise ValueError("cannot drop all three modalities")
    if not modalities:
        return index
    new_records = []
    for rec in index.records:
        if rec.split == "train":
            new_records.append(rec)
            continue
        files = {m: rel for m, rel in rec.files.items() if m not in modalities}
        if not files:
            raise ValueError(
                f"record {rec.identity}/{rec.seq} would lose its last modality"
            )
        new_records.append(replace(rec, files=files))
    return DatasetIndex(root=index.root, records=tuple(new_records))


# ---------------------------------------------------------------------------
# PK batch sampling
# ---------------------------------------------------------------------------


def pk_sampler(
    index: DatasetIndex, p: int, k: int, seed: int, epochs: int = 1
) -> Iterator[list[DatasetRecord]]:
    """Yield batches of P identities x K train samples, epoch by epoch.

    Every identity appears at least once per epoch; short identity groups at
    the epoch tail are padded with already-seen identities so each batch holds
    exactly P distinct labels.
    """
    by_id: dict[int, list[DatasetRecord]] = {}
    for rec in index.train:
        by_id.setdefault(rec.identity, []).append(rec)
    if len(by_id) < p:
        raise ConfigError(f"need at least P={p} train identities, have {len(by_id)}")
    short = sorted(i for i, recs in by_id.items() if len(recs) < k)
    if short:
        raise ConfigError(f"identities with fewer than K={k} samples: {short}")

    rng = np.random.default_rng(seed)
    ids = sorted(by_id)
    for _ in range(epochs):
        order = list(ids)
        rng.shuffle(order)
        for start in range(0, len(order), p):
            group = order[start : start + p]
            if len(group) < p:
                fillers = [i for i in order if i not in group]
                rng.shuffle(fillers)
                group = group + fillers[: p - len(group)]
            batch = []
            for identity in group:
                recs = list(by_id[identity])
                rng.shuffle(recs)
                batch.extend(recs[:k])
            yield batch
