"""End-to-end model: backbone -> pillars -> dual-graph attention -> group scoring -> sum.

Also the training loop, MAD evaluation, the six-row ablation and checkpoints.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import archive
from . import tensor as T
from .backbone import DOWNSAMPLE, Backbone, BackboneConfig
from .data import Sample, augment_sample
from .dgam import AttentionBlock, EmaState, apply_attention, cab_attention, ema_update, node_average, pab_attention
from .graph import RoiSchema, build_graphs, load_roi_schema
from .nn import Module
from .optim import Adam, step_lr
from .pillars import augment_pillars, extract_pillars
from .scoring import GroupHead, random_grouping
from .tensor import Tensor

log = logging.getLogger(__name__)

GROUPINGS = ("agconv", "rgconv", "shared")
CONTEXT_TRAIN_MODES = ("ema", "sample")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_hidden: tuple[int, ...] = (32, 16)
    bn_mode: str = "joint"
    pab_depth: int = 2
    cab_hidden: tuple[int, ...] = (32,)
    attention_output: str = "sigmoid"
    laplacian_mode: str = "symmetric"
    grouping: str = "agconv"
    rg_seed: int = 0
    use_pa: bool = True
    use_ca: bool = True
    ema_theta: float = 0.01
    context_train: str = "ema"  # "ema": blended per-gender map; "sample": each sample's own map
    score_scale: float = 12.0   # months per unit of raw head output
    seed: int = 0

    def validate(self) -> None:
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}, got {self.grouping!r}")
        if self.pab_depth < 1:
            raise ValueError("pab_depth must be at least 1")
        if self.context_train not in CONTEXT_TRAIN_MODES:
            raise ValueError(f"context_train must be one of {CONTEXT_TRAIN_MODES}")
        if not 0.0 < self.ema_theta <= 1.0:
            raise ValueError("ema_theta must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        bb = {k: v for k, v in bb.items() if k != "downsample"}
        if "widths" in bb:
            bb["widths"] = tuple(bb["widths"])
        for key in ("head_hidden", "cab_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(backbone=BackboneConfig(**bb), **d)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 48
    lr: float = 1e-3
    milestones: tuple[int, ...] = (60, 120)
    lr_gamma: float = 0.1
    seed: int = 0
    augment: bool = False
    age_unit: str = "months"

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if any(m >= self.epochs for m in self.milestones) and self.epochs > 0:
            raise ValueError(f"lr milestones {self.milestones} must precede the final epoch {self.epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def scaled(cls, epochs: int, **kwargs) -> "TrainConfig":
        """Config whose decay milestones keep the 60/200 and 120/200 proportions."""
        milestones = tuple(sorted({max(1, round(epochs * 0.3)), max(1, round(epochs * 0.6))} - {epochs}))
        return cls(epochs=epochs, milestones=milestones, **kwargs)

    def lr_at(self, epoch: int) -> float:
        return step_lr(epoch, self.lr, self.milestones, self.lr_gamma)


# -- batching ----------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    genders: np.ndarray
    centers: np.ndarray           # (B, N, 2)
    ages: np.ndarray
    image_size: tuple[int, int]
    images: np.ndarray | None = None      # (B, 1, H, W)
    feature_maps: np.ndarray | None = None  # (B, C, h, w)


def make_batch(samples: Sequence[Sample]) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    use_fm = [s.pixels is None and s.image is None and s.feature_map is not None for s in samples]
    if any(use_fm) and not all(use_fm):
        raise ValueError("a batch must be all image-backed or all feature-map-backed")
    genders = np.array([s.gender for s in samples], dtype=np.float64)
    centers = np.stack([s.centers for s in samples])
    ages = np.array([s.age_months for s in samples])
    ids = [s.id for s in samples]
    if all(use_fm):
        maps, sizes = zip(*(archive.load_feature_map(s.feature_map) for s in samples))
        if len(set(sizes)) != 1:
            raise ValueError("all samples in a batch must share one image size")
        return Batch(ids, genders, centers, ages, sizes[0], feature_maps=np.stack(maps))
    pixels = [s.load_pixels() for s in samples]
    if len({p.shape for p in pixels}) != 1:
        raise ValueError("all samples in a batch must share one image size; resize upstream")
    return Batch(ids, genders, centers, ages, pixels[0].shape, images=np.stack(pixels)[:, None])


# -- model ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    age: Tensor                 # (B,)
    scores: Tensor              # (B, N)  raw ROI scores S
    weighted: Tensor            # (B, N)  S* = context ⊙ S
    feature_attention: Tensor | None   # (B, N, f) node-averaged
    context_attention: Tensor | None   # (B, N) per-sample CAB output
    context_used: np.ndarray | None    # (B, N) map actually applied


@dataclass
class PredictionRecord:
    sample_id: str
    age: float
    scores: list[float]
    weighted_scores: list[float]
    feature_attention: list[float] | None
    context_attention: list[float] | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class BoneAgeModel(Module):
    def __init__(self, config: ModelConfig | None = None, schema: RoiSchema | None = None):
        config = config or ModelConfig()
        config.validate()
        self.config = config
        self.schema = schema or load_roi_schema()
        self.graphs = build_graphs(self.schema, config.laplacian_mode)
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone(config.backbone, rng)
        f = config.backbone.out_channels + 3
        self.pab = AttentionBlock([f] * (config.pab_depth + 1), rng, config.attention_output)
        self.cab = AttentionBlock([f, *config.cab_hidden, 1], rng, config.attention_output)
        self.head = GroupHead(self.group_assignment(), f, rng, config.head_hidden, config.bn_mode)
        self.ema = EmaState(theta=config.ema_theta)

    @property
    def n_features(self) -> int:
        return self.config.backbone.out_channels + 3

    def group_assignment(self) -> np.ndarray:
        n = self.schema.n
        if self.config.grouping == "agconv":
            return self.schema.group_index()
        if self.config.grouping == "rgconv":
            return random_grouping(self.config.rg_seed, len(self.schema.group_labels), n)
        return np.zeros(n, dtype=np.int64)

    def pillars(self, batch: Batch) -> Tensor:
        if batch.feature_maps is not None:
            fm = Tensor(batch.feature_maps)
            if fm.shape[1] != self.config.backbone.out_channels:
                raise T.ShapeError("pillars", f"feature maps have {fm.shape[1]} channels, "
                                              f"model expects {self.config.backbone.out_channels}")
        else:
            fm = self.backbone(batch.images).tensor
        if batch.centers.shape[1] != self.schema.n:
            raise ValueError(f"expected {self.schema.n} ROI centers per sample, got {batch.centers.shape[1]}")
        raw = extract_pillars(fm, batch.centers, DOWNSAMPLE)
        return augment_pillars(raw, batch.genders, batch.centers, batch.image_size)

    def forward(self, batch: Batch) -> ForwardOutput:
        cfg = self.config
        x = self.pillars(batch)
        att_x = None
        if cfg.use_pa:
            att_x = node_average(pab_attention(x, self.graphs, self.pab))
        x_star, _ = apply_attention(x, None, att_x, None)
        scores = self.head(x_star) * cfg.score_scale
        att_s = context = None
        if cfg.use_ca:
            att_s = cab_attention(x, self.graphs, self.cab).reshape(scores.shape)
            if self.training and cfg.context_train == "sample":
                context = att_s
            elif self.training:
                context = self._blended_context(att_s, batch.genders.astype(int))
            else:
                context = Tensor(np.stack([self.ema.get(g)[:, 0] for g in batch.genders.astype(int)]))
        _, weighted = apply_attention(None, scores, None, context)
        age = weighted.sum(axis=1)
        return ForwardOutput(age, scores, weighted, att_x, att_s, None if context is None else context.data)

    def _blended_context(self, att_s: Tensor, genders: np.ndarray) -> Tensor:
        """Per-gender map after this batch's EMA step, differentiable through the batch term."""
        theta = self.config.ema_theta
        rows = []
        for g in (0, 1):
            members = np.flatnonzero(genders == g)
            if len(members) == 0:
                prev = self.ema.maps.get(g)
                rows.append(Tensor(np.zeros((1, self.schema.n)) if prev is None else prev.reshape(1, -1)))
                continue
            batch_mean = att_s[members].mean(axis=0, keepdims=True)
            if self.ema.initialized(g):
                rows.append(Tensor((1.0 - theta) * self.ema.maps[g].reshape(1, -1)) + batch_mean * theta)
            else:
                rows.append(batch_mean)
        return T.concat(rows, axis=0)[genders]

    def update_context_ema(self, out: ForwardOutput, genders: np.ndarray) -> None:
        if out.context_attention is None:
            return
        att = out.context_attention.data
        for g in (0, 1):
            rows = att[genders == g]
            if len(rows):
                ema_update(self.ema, g, rows[:, :, None], training=self.training)

    def predict(self, samples: Sequence[Sample], batch_size: int = 32) -> list[PredictionRecord]:
        """Inference-mode predictions; the model is left in eval mode."""
        self.eval()
        records = []
        with T.no_grad():
            for start in range(0, len(samples), batch_size):
                batch = make_batch(samples[start:start + batch_size])
                out = self(batch)
                records.extend(_records(batch, out))
        return records


def _records(batch: Batch, out: ForwardOutput) -> list[PredictionRecord]:
    recs = []
    for b, sid in enumerate(batch.ids):
        recs.append(PredictionRecord(
            sample_id=sid,
            age=float(out.age.data[b]),
            scores=out.scores.data[b].tolist(),
            weighted_scores=out.weighted.data[b].tolist(),
            feature_attention=None if out.feature_attention is None else out.feature_attention.data[b, 0].tolist(),
            context_attention=None if out.context_used is None else out.context_used[b].tolist(),
        ))
    return recs


def forward(model: BoneAgeModel, samples: Sequence[Sample], mode: str = "infer") -> list[PredictionRecord]:
    """Run one batch in ``train`` (batch statistics, per-sample context) or ``infer`` mode.

    Train mode here neither updates parameters nor the context EMA.
    """
    if mode == "infer":
        return model.predict(samples, batch_size=max(len(samples), 1))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.train()
    saved = [(name, buf.copy()) for name, buf in model.named_buffers()]
    with T.no_grad():
        batch = make_batch(samples)
        recs = _records(batch, model(batch))
    bufs = dict(model.named_buffers())
    for name, value in saved:
        bufs[name][...] = value
    return recs


def prime_context(model: BoneAgeModel, samples: Sequence[Sample], batch_size: int = 32) -> None:
    """Initialize missing per-gender context maps from one training-mode batch, without
    changing parameters or batch-norm statistics. Used to score untrained models."""
    if not model.config.use_ca:
        return
    model.train()
    saved = [(name, buf.copy()) for name, buf in model.named_buffers()]
    with T.no_grad():
        for g in (0, 1):
            if model.ema.initialized(g):
                continue
            chosen = [s for s in samples if s.gender == g][:batch_size]
            if len(chosen) < 2:
                continue
            batch = make_batch(chosen)
            model.update_context_ema(model(batch), batch.genders)
    bufs = dict(model.named_buffers())
    for name, value in saved:
        bufs[name][...] = value
    model.eval()


# -- training ------------------------------------------------------------------------

class TrainingAborted(RuntimeError):
    """Loss became non-finite; ``state`` is the last good model state (start of the epoch)."""

    def __init__(self, epoch: int, step: int, state: dict):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; restored last good state")
        self.epoch, self.step, self.state = epoch, step, state


@dataclass
class LogRow:
    epoch: int
    lr: float
    train_loss: float
    val_mad: float | None


def _snapshot(model: BoneAgeModel) -> dict:
    return {"state": model.state_dict(), "ema": {g: m.copy() for g, m in model.ema.maps.items()}}


def _restore(model: BoneAgeModel, snap: dict) -> None:
    model.load_state_dict(snap["state"])
    model.ema.maps = {g: m.copy() for g, m in snap["ema"].items()}


def train(model: BoneAgeModel, samples: Sequence[Sample], config: TrainConfig,
          val_samples: Sequence[Sample] | None = None, progress=None) -> list[LogRow]:
    """L1 regression of age on the score sum, Adam with step decay, EMA per batch.

    Batches with a single sample are skipped (batch norm needs two).
    """
    config.validate()
    if not samples:
        raise ValueError("training set is empty")
    if model.config.use_ca and len({s.gender for s in samples}) < 2:
        raise ValueError("context attention needs both genders in the training set")
    opt = Adam(list(model.named_parameters()), lr=config.lr)
    samples = list(samples)
    history: list[LogRow] = []
    if not config.augment:
        for s in samples:
            if s.pixels is None and s.image is not None:
                s.load_pixels()
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        model.train()
        good = _snapshot(model)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        losses, weights = [], []
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            chosen = [samples[i] for i in idx]
            if config.augment:
                chosen = [augment_sample(s, seed=int(np.random.SeedSequence([config.seed, epoch, int(i)])
                                                      .generate_state(1)[0]))
                          for s, i in zip(chosen, idx)]
            batch = make_batch(chosen)
            out = model(batch)
            loss = T.l1_loss(out.age, Tensor(batch.ages))
            if not math.isfinite(loss.item()):
                _restore(model, good)
                raise TrainingAborted(epoch, step, good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.update_context_ema(out, batch.genders)
            losses.append(loss.item())
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        val_mad = evaluate(model, val_samples).mad if val_samples else None
        row = LogRow(epoch, opt.lr, train_loss, val_mad)
        history.append(row)
        log.debug("epoch %d lr %.1e loss %.3f val %s", epoch, opt.lr, train_loss, val_mad)
        if progress is not None:
            progress(row)
    model.eval()
    return history


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EvalReport:
    mad: float
    count: int
    records: list[PredictionRecord]
    roi_spearman: dict[str, float] | None = None
    score_table: list[dict] | None = None

    @property
    def mean_spearman(self) -> float | None:
        if not self.roi_spearman:
            return None
        return float(np.mean(list(self.roi_spearman.values())))


def mean_absolute_difference(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("MAD needs two non-empty arrays of equal shape")
    return float(np.mean(np.abs(pred - truth)))


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")  # undefined for a constant column
    return float(stats.spearmanr(a, b).statistic)


def evaluate(model: BoneAgeModel, samples: Sequence[Sample], batch_size: int = 32) -> EvalReport:
    """MAD in months; per-ROI Spearman rho of weighted scores vs ground truth when available."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    records = model.predict(samples, batch_size)
    mad = mean_absolute_difference([r.age for r in records], [s.age_months for s in samples])
    report = EvalReport(mad, len(samples), records)
    if all(s.scores is not None for s in samples):
        pred = np.array([r.weighted_scores for r in records])
        truth = np.stack([s.scores for s in samples])
        report.roi_spearman = {name: _spearman(pred[:, n], truth[:, n])
                               for n, name in enumerate(model.schema.names)}
        report.score_table = [
            {"id": s.id, "roi": name, "true_score": float(truth[k, n]),
             "predicted_score": float(pred[k, n]), "raw_score": float(records[k].scores[n])}
            for k, s in enumerate(samples) for n, name in enumerate(model.schema.names)
        ]
    return report


# -- ablation ------------------------------------------------------------------------

ABLATION_ROWS = (
    # (exp, label, grouping, PA, CA)
    (1, "backbone + shared score block", "shared", False, False),
    (2, "+AG-Conv", "agconv", False, False),
    (3, "+RG-Conv", "rgconv", False, False),
    (4, "+AG-Conv +PA", "agconv", True, False),
    (5, "+AG-Conv +CA", "agconv", False, True),
    (6, "+AG-Conv +PA +CA", "agconv", True, True),
)


def ablation_configs(base: ModelConfig) -> list[tuple[int, str, ModelConfig]]:
    return [(exp, label, dataclasses.replace(base, grouping=grouping, use_pa=pa, use_ca=ca))
            for exp, label, grouping, pa, ca in ABLATION_ROWS]


@dataclass
class AblationRow:
    exp: int
    label: str
    grouping: str
    use_pa: bool
    use_ca: bool
    mads: list[float]

    @property
    def mean_mad(self) -> float:
        return float(np.mean(self.mads))


def run_ablation(train_samples: Sequence[Sample], val_samples: Sequence[Sample], base: ModelConfig,
                 train_config: TrainConfig, seeds: Sequence[int] = (0,),
                 schema: RoiSchema | None = None) -> list[AblationRow]:
    rows = []
    for exp, label, cfg in ablation_configs(base):
        mads = []
        for seed in seeds:
            model = BoneAgeModel(dataclasses.replace(cfg, seed=seed, rg_seed=seed), schema)
            train(model, train_samples, dataclasses.replace(train_config, seed=seed))
            mads.append(evaluate(model, val_samples).mad)
        rows.append(AblationRow(exp, label, cfg.grouping, cfg.use_pa, cfg.use_ca, mads))
        log.info("ablation exp %d (%s): %s", exp, label, mads)
    return rows


# -- parameter counts ------------------------------------------------------------------

def count_params(model: BoneAgeModel) -> dict[str, int]:
    counts = {
        "backbone": model.backbone.num_parameters(),
        "pab": model.pab.num_parameters(),
        "cab": model.cab.num_parameters(),
        "head": model.head.num_parameters(),
    }
    counts["dgam"] = counts["pab"] + counts["cab"]
    counts["head_plus_dgam"] = counts["head"] + counts["dgam"]
    counts["total"] = counts["backbone"] + counts["head_plus_dgam"]
    return counts


# -- checkpoints -------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: BoneAgeModel, extra: dict | None = None) -> bytes:
    tensors = dict(model.state_dict())
    for g, m in model.ema.maps.items():
        tensors[f"ema.gender{g}"] = m
    meta = {
        "config": model.config.to_dict(),
        "schema": model.schema.to_document(),
        "schema_hash": model.schema.hash(),
        "ema_genders": sorted(model.ema.maps),
    }
    if extra:
        meta["extra"] = extra
    return archive.encode(tensors, meta)


def save_checkpoint(path, model: BoneAgeModel, extra: dict | None = None) -> None:
    archive.write_atomic(path, checkpoint_bytes(model, extra))


def load_checkpoint(path, schema: RoiSchema | None = None) -> BoneAgeModel:
    """Rebuild a model from an archive; ``schema``, if given, must match the stored hash."""
    tensors, meta = archive.load(path)
    stored = load_roi_schema(meta["schema"], expected_count=None)
    if stored.hash() != meta["schema_hash"]:
        raise CheckpointError("checkpoint schema does not match its recorded hash")
    if schema is not None and schema.hash() != meta["schema_hash"]:
        raise CheckpointError("checkpoint was trained with a different ROI schema")
    config = ModelConfig.from_dict(meta["config"])
    model = BoneAgeModel(config, stored)
    ema = {g: tensors.pop(f"ema.gender{g}") for g in meta["ema_genders"]}
    model.load_state_dict(tensors)
    model.ema.maps = {int(g): m for g, m in ema.items()}
    model.eval()
    return model


def write_log_csv(path, rows: Sequence[LogRow], header_comment: str | None = None) -> None:
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append("epoch,lr,train_loss,val_mad")
    for r in rows:
        val = "" if r.val_mad is None else repr(r.val_mad)
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{val}")
    Path(path).write_text("\n".join(lines) + "\n")
