"""Training and experiment orchestration.

Training always sees complete triplets; the transformation pairs learn from
their reconstruction/similarity losses while the ReID losses shape the final
embedding. At test time all parameters are frozen and the per-sample missing
state drives recovery and graph cutting.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .cmft import CmftBank, recover_missing, reconstruction_loss, similarity_loss_batch
from .core import (
    MODALITIES,
    EmbeddingVector,
    EnhancementMode,
    FeatureMap,
    MissingState,
    Modality,
    RunConfig,
    SampleTriplet,
)
from .data import (
    DatasetIndex,
    SyntheticSpec,
    fixed_missing,
    generate_synthetic,
    load_index,
    load_triplet,
    pk_sampler,
    simulate_missing,
)
from .dem import EnhancementGraph, compose_final, compose_final_batch
from .encoder import BranchEncoder, extract, gap, replicate_channels
from .evalkit import MetricsReport, evaluate_retrieval
from .objectives import (
    ClassifierHead,
    LossReport,
    batch_hard_triplet,
    smoothed_ce_batch,
    total_loss,
)

CHECKPOINT_VERSION = 1

FIXED_SCENARIOS: tuple[tuple[str, frozenset[Modality]], ...] = (
    ("no_missing", frozenset()),
    ("missing_nir", frozenset({Modality.NIR})),
    ("missing_tir", frozenset({Modality.TIR})),
    ("missing_nir_tir", frozenset({Modality.NIR, Modality.TIR})),
)


class ReidModel(nn.Module):
    """Everything trainable: three branches, six transformation pairs with
    their projection heads, the enhancement graph, and the classifier."""

    def __init__(self, config: RunConfig, n_classes: int):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        self.encoders = nn.ModuleDict(
            {m.short: BranchEncoder.from_config(m, config) for m in MODALITIES}
        )
        self.cmft = CmftBank.from_config(config)
        self.graph = EnhancementGraph.from_config(config)
        self.classifier = ClassifierHead(config.final_dim, n_classes, config.dropout)
        if config.aux_branch_loss:
            self.aux_heads = nn.ModuleDict(
                {
                    m.short: ClassifierHead(config.feature_channels, n_classes, config.dropout)
                    for m in MODALITIES
                }
            )
        else:
            self.aux_heads = None

    def encoder(self, modality: Modality) -> BranchEncoder:
        return self.encoders[modality.short]

    def encode_batch(self, images: dict[Modality, torch.Tensor]) -> dict[Modality, torch.Tensor]:
        return {
            m: self.encoder(m)(replicate_channels(x, 3)) for m, x in images.items()
        }


def embed_sample(sample: SampleTriplet, model: ReidModel) -> EmbeddingVector:
    """Frozen-parameter inference for one sample under its missing state."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats: dict[Modality, FeatureMap] = {
                m: extract(model.encoder(m), img) for m, img in sample.images.items()
            }
            feats = recover_missing(
                sample.missing, feats, model.cmft, model.config.recovery_priority
            )
            return compose_final(sample.missing, feats, model.graph)
    finally:
        if was_training:
            model.train()


@dataclass
class TrainState:
    """Mutable optimizer/schedule state for one training run."""

    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.MultiStepLR
    epoch: int = 0
    step: int = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def make_train_state(model: ReidModel, config: RunConfig) -> TrainState:
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.resolved_milestones()), gamma=config.lr_gamma
    )
    return TrainState(optimizer=optimizer, scheduler=scheduler)


def train_step(
    batch: Sequence[SampleTriplet], model: ReidModel, state: TrainState
) -> LossReport:
    """One optimization step on a complete batch; aborts on non-finite loss."""
    config = model.config
    if any(not s.missing.is_complete for s in batch):
        raise ValueError("training batches must carry all three modalities")
    model.train()

    images = {
        m: torch.stack([s.images[m] for s in batch]) for m in MODALITIES
    }
    labels = torch.tensor([s.identity for s in batch], dtype=torch.long)
    feats = model.encode_batch(images)

    # transformation losses over every ordered pair, averaged
    l_rec = torch.zeros(())
    l_sim = torch.zeros(())
    if config.use_l_rec or config.use_l_sim:
        rec_terms, sim_terms = [], []
        for pair in model.cmft.all_pairs():
            src = feats[pair.source]
            tgt = feats[pair.target]
            if config.cmft_detach_source:
                src = src.detach()
                tgt = tgt.detach()
            fake, rec = pair(src)
            if config.use_l_rec:
                rec_terms.append(
                    reconstruction_loss(fake, images[pair.target], config.recon_reduction)
                )
            if config.use_l_sim:
                sim_terms.append(
                    similarity_loss_batch(model.cmft.head(pair.target), tgt, rec)
                )
        if rec_terms:
            l_rec = torch.stack(rec_terms).mean()
        if sim_terms:
            l_sim = torch.stack(sim_terms).mean()

    # ReID losses on the composed final embedding (complete state in training)
    emb = compose_final_batch(MissingState.complete(), feats, model.graph)
    l_tri = batch_hard_triplet(emb, labels, config.margin)
    logits = model.classifier(emb)
    l_ce = smoothed_ce_batch(logits, labels, config.smoothing)
    if model.aux_heads is not None:
        for m in MODALITIES:
            pooled = gap(feats[m])
            l_tri = l_tri + batch_hard_triplet(pooled, labels, config.margin)
            l_ce = l_ce + smoothed_ce_batch(
                model.aux_heads[m.short](pooled), labels, config.smoothing
            )

    total = l_tri + l_ce + config.rho * l_rec + config.mu * l_sim
    if not bool(torch.isfinite(total)):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: tri={float(l_tri)} "
            f"ce={float(l_ce)} rec={float(l_rec)} sim={float(l_sim)}"
        )
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    return total_loss(l_tri, l_ce, l_rec, l_sim, config.rho, config.mu)


def fit(
    model: ReidModel,
    index: DatasetIndex,
    config: RunConfig,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
) -> list[LossReport]:
    """Full training loop; writes one log record per step and a checkpoint per
    epoch (retained as last-good on abort)."""
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)
    state = make_train_state(model, config)
    triplets = {
        (rec.identity, rec.seq): load_triplet(index, rec) for rec in index.train
    }

    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write("step,epoch,lr," + ",".join(LossReport.CSV_FIELDS) + "\n")
    history: list[LossReport] = []
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            batches = pk_sampler(
                index, config.batch_p, config.batch_k, seed=config.seed + epoch
            )
            for batch_records in batches:
                batch = [triplets[(rec.identity, rec.seq)] for rec in batch_records]
                report = train_step(batch, model, state)
                history.append(report)
                if log_file:
                    log_file.write(
                        f"{state.step},{epoch},{state.lr:.6g},{report.csv_row()}\n"
                    )
            state.scheduler.step()
            if checkpoint_path:
                save_checkpoint(model, config, checkpoint_path, epoch=epoch)
    finally:
        if log_file:
            log_file.close()
    return history


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: ReidModel, config: RunConfig, path: str | Path, epoch: int = -1
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": config.as_mapping(),
            "n_classes": model.n_classes,
            "epoch": epoch,
            "model_state": model.state_dict(),
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[ReidModel, RunConfig, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = RunConfig.from_mapping(payload["config"])
    model = ReidModel(config, payload["n_classes"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config, payload


def checkpoint_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# evaluation over an index
# ---------------------------------------------------------------------------


def embed_split(
    model: ReidModel, index: DatasetIndex, split: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embed every record of a split; returns (embeddings, ids, cameras)."""
    records = index.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    embs, ids, cams = [], [], []
    for rec in records:
        sample = load_triplet(index, rec)
        embs.append(embed_sample(sample, model).data.numpy())
        ids.append(rec.identity)
        cams.append(rec.camera)
    return np.stack(embs), np.asarray(ids), np.asarray(cams)


def evaluate_index(
    model: ReidModel,
    index: DatasetIndex,
    scenario: str,
    eta: float = 0.0,
    checkpoint_hash: str = "",
) -> MetricsReport:
    q_emb, q_ids, q_cams = embed_split(model, index, "query")
    g_emb, g_ids, g_cams = embed_split(model, index, "gallery")
    map_score, cmc, skipped = evaluate_retrieval(
        q_emb, q_ids, q_cams, g_emb, g_ids, g_cams,
        max_rank=min(model.config.eval_max_rank, len(g_ids)),
    )
    return MetricsReport(
        scenario=scenario,
        map=map_score,
        cmc=tuple(float(c) for c in cmc),
        n_query=len(q_ids),
        n_gallery=len(g_ids),
        n_skipped=skipped,
        enhancement_mode=model.config.effective_mode.value,
        eta=eta,
        checkpoint_sha256=checkpoint_hash,
        config=model.config.as_mapping(),
    )


def scenario_index(index: DatasetIndex, drop: frozenset[Modality]) -> DatasetIndex:
    return fixed_missing(index, drop) if drop else index


# ---------------------------------------------------------------------------
# whole experiment: train once, evaluate all scenarios from one checkpoint
# ---------------------------------------------------------------------------


def ensure_dataset(config: RunConfig, data_dir: str | Path) -> DatasetIndex:
    """Load the dataset under data_dir, generating it from the config's
    synthetic spec when no manifest is present."""
    data_dir = Path(data_dir)
    try:
        return load_index(data_dir)
    except FileNotFoundError:
        return generate_synthetic(SyntheticSpec.from_config(config), data_dir)


def run_experiment(
    config: RunConfig, data_dir: str | Path, out_dir: str | Path
) -> list[MetricsReport]:
    """Train one model, then evaluate the four fixed scenarios plus the eta
    sweep, all against the single saved checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(exist_ok=True)
    index = ensure_dataset(config, data_dir)
    config.write(out_dir / "config.txt")

    torch.manual_seed(config.seed)
    n_classes = len(index.identities("train"))
    model = ReidModel(config, n_classes)
    ckpt_path = out_dir / "checkpoint.pt"
    fit(model, index, config, log_path=out_dir / "train_log.csv",
        checkpoint_path=ckpt_path)
    ckpt_hash = checkpoint_sha256(ckpt_path)

    reports: list[MetricsReport] = []
    for scenario, drop in FIXED_SCENARIOS:
        model_eval, _, _ = load_checkpoint(ckpt_path)
        if checkpoint_sha256(ckpt_path) != ckpt_hash:
            raise RuntimeError("checkpoint changed between evaluations")
        report = evaluate_index(
            model_eval, scenario_index(index, drop), scenario,
            checkpoint_hash=ckpt_hash,
        )
        report.write(metrics_dir / f"{scenario}.txt")
        report.write_cmc_points(metrics_dir / f"{scenario}_cmc.csv")
        reports.append(report)

    sweep_rows = []
    for i, eta in enumerate(config.sweep_etas):
        model_eval, _, _ = load_checkpoint(ckpt_path)
        sim = simulate_missing(index, eta, seed=config.seed * 100003 + i)
        label = f"eta_{eta:g}"
        report = evaluate_index(model_eval, sim, label, eta=eta, checkpoint_hash=ckpt_hash)
        report.write(metrics_dir / f"{label}.txt")
        reports.append(report)
        sweep_rows.append((eta, report.map, report.rank(1), report.rank(5), report.rank(10)))

    if sweep_rows:
        write_eta_points(sweep_rows, out_dir / "eta_sweep.csv")
        from .plots import save_eta_curve  # deferred: matplotlib import is slow

        save_eta_curve(sweep_rows, out_dir / "eta_sweep.png")
    return reports


def write_eta_points(
    rows: Sequence[tuple[float, float, float, float, float]], path: str | Path
) -> None:
    lines = ["eta,map,rank1,rank5,rank10"]
    for eta, m, r1, r5, r10 in rows:
        lines.append(f"{eta:g},{m:.6f},{r1:.6f},{r5:.6f},{r10:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_embeddings(
    model: ReidModel, index: DatasetIndex, path: str | Path
) -> None:
    """Write one CSV row per query/gallery record: labels, state, embedding."""
    rows = []
    for split in ("query", "gallery"):
        for rec in index.split(split):
            sample = load_triplet(index, rec)
            emb = embed_sample(sample, model).data.numpy()
            state = "+".join(m.short for m in sorted(rec.available))
            values = ",".join(f"{v:.6g}" for v in emb)
            rows.append(f"{rec.identity},{rec.camera},{split},{state},{values}")
    dim = model.config.final_dim
    header = "identity,camera,split,available," + ",".join(
        f"e{i}" for i in range(dim)
    )
    Path(path).write_text("\n".join([header] + rows) + "\n")
