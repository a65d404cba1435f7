"""Two-phase SGD training: the tabular head on the tabular-only cohort, then the fusion path on paired data."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .embeddings import EmbeddingBank, TabularSurrogateEncoder
from .metrics import ScoredSet, auroc, balanced_accuracy, select_threshold
from .model import Batch, FusionConfig, FusionModel, TabularHead, TabularModel, pad_studies, restore, snapshot
from .tabular import FeatureSchema, FittedScaler, PatientRecord, transform_many

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


class MissingStudyError(KeyError):
    def __init__(self, ids: Sequence[str]):
        self.ids = list(ids)
        shown = ", ".join(self.ids[:10]) + (" ..." if len(self.ids) > 10 else "")
        super().__init__(f"{len(self.ids)} record(s) have no embeddings in the bank: {shown}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    max_steps: int = 5000
    seed: int = 17
    eval_every: int = 100
    phase: str = "fusion"
    class_weighted: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("max_steps and eval_every must be >= 1")
        if self.phase not in ("tabular", "fusion"):
            raise ValueError(f"phase must be 'tabular' or 'fusion', got {self.phase!r}")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_val_auroc: float | None = None

    def append(self, step: int, train_loss: float, val_auroc: float, val_bacc: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("TrainLog steps must be strictly increasing")
        self.records.append({"step": step, "train_loss": train_loss, "val_auroc": val_auroc, "val_bacc": val_bacc})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "split", "metric", "value"])
            for r in self.records:
                w.writerow([r["step"], "train", "loss", repr(r["train_loss"])])
                w.writerow([r["step"], "val", "auroc", repr(r["val_auroc"])])
                w.writerow([r["step"], "val", "bacc", repr(r["val_bacc"])])
            w.writerow([self.best_step, "val", "selected_step", self.best_step])


# ------------------------------------------------------------------ data


def make_batch(records: Sequence[PatientRecord], schema: FeatureSchema, scaler: FittedScaler,
               encoder: TabularSurrogateEncoder, bank: EmbeddingBank | None = None,
               max_len: int | None = None) -> Batch:
    """Preprocess, encode, and (when a bank is given) attach padded video embeddings."""
    x = transform_many(scaler, schema, records)
    htab = encoder.encode(x) if len(records) else np.zeros((0, encoder.out_width))
    y = np.array([r.label for r in records], dtype=np.float64)
    if bank is None:
        return Batch(htab, None, None, y)
    missing = [r.patient_id for r in records if r.study_id is None or r.study_id not in bank]
    if missing:
        raise MissingStudyError(missing)
    studies = [bank.studies[r.study_id] for r in records]
    videos, valid = pad_studies(studies, max_len)
    return Batch(htab, videos, valid, y)


def subsample_paired(records: Sequence[PatientRecord], fraction: float, seed: int = 0) -> list[PatientRecord]:
    """Class-stratified patient-level subsample, nested across fractions for a fixed seed."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    by_patient: dict[str, list[PatientRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    keep: set[str] = set()
    rng = np.random.default_rng(seed)
    for label in (0, 1):
        ids = sorted(p for p, rows in by_patient.items() if rows[0].label == label)
        order = rng.permutation(len(ids))
        k = int(round(fraction * len(ids)))
        keep.update(ids[i] for i in order[:k])
    return [r for r in records if r.patient_id in keep]


def batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool) -> Iterable[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch."""
    if n < (batch_size if drop_last else 1):
        raise ValueError(f"not enough samples ({n}) for batch size {batch_size}")
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i: i + batch_size]
            if len(idx) < batch_size and (drop_last or len(idx) < 2):
                continue
            yield idx


# ------------------------------------------------------------- optimizer


def sgd_step(params: Iterable[T.Tensor], lr: float, wd: float, names: Sequence[str] | None = None) -> None:
    """``p <- p - lr * (g + wd * p)`` for every parameter that requires grad."""
    params = list(params)
    for i, p in enumerate(params):
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else 0.0
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            name = names[i] if names else (p.name or f"#{i}")
            raise NumericError(f"non-finite gradient in parameter {name}")
        p.data = p.data - lr * (g + wd * p.data)
        p.grad = None


def _class_weights(y: np.ndarray) -> np.ndarray:
    pos = max(y.mean(), 1e-12)
    return np.where(y == 1, 0.5 / pos, 0.5 / max(1 - pos, 1e-12))


def _fit(model, train: Batch, val: Batch, cfg: TrainConfig, drop_last: bool) -> TrainLog:
    if len(np.unique(train.y)) < 2:
        raise ValueError("training set has a single class; refusing to train")
    params = model.trainable()
    names = list(params)
    rng = np.random.default_rng([cfg.seed, 2])
    stream = batches(len(train), cfg.batch_size, rng, drop_last)
    weights_all = _class_weights(train.y) if cfg.class_weighted else None
    tlog = TrainLog()
    best = None
    running_loss, count = 0.0, 0
    for step in range(1, cfg.max_steps + 1):
        idx = next(stream)
        b = train.take(idx)
        loss = model.loss(b, None if weights_all is None else weights_all[idx])
        T.backward(loss)
        sgd_step(params.values(), cfg.learning_rate, cfg.weight_decay, names)
        running_loss += float(loss.data)
        count += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            scores = ScoredSet(model.predict(val), val.y.astype(int))
            va = auroc(scores)
            vb = balanced_accuracy(scores, select_threshold(scores))
            tlog.append(step, running_loss / count, va, vb)
            running_loss, count = 0.0, 0
            if best is None or va > tlog.best_val_auroc:
                tlog.best_step, tlog.best_val_auroc = step, va
                best = snapshot(model)
            log.debug("step %d loss %.4f val_auroc %.4f", step, tlog.records[-1]["train_loss"], va)
    restore(model, best)
    return tlog


def train_tabular(train: Batch, val: Batch, cfg: TrainConfig, encoder: TabularSurrogateEncoder,
                  hidden: int = 64) -> tuple[TabularModel, TrainLog]:
    head = TabularHead(encoder.out_width, hidden, seed=cfg.seed)
    model = TabularModel(encoder, head)
    tlog = _fit(model, train, val, cfg, drop_last=False)
    head.fitted = True
    head.freeze()
    return model, tlog


def train_fusion(train: Batch, val: Batch, cfg: TrainConfig, model_cfg: FusionConfig,
                 encoder: TabularSurrogateEncoder, f_tab: TabularHead | None = None,
                 kind: str = "treatnet") -> tuple[FusionModel, TrainLog]:
    if train.videos is None or val.videos is None:
        raise ValueError("fusion training needs video embeddings for every record")
    if train.videos.shape[-1] != model_cfg.d:
        raise T.ShapeError(f"bank width {train.videos.shape[-1]} does not match model width d={model_cfg.d}")
    model = FusionModel(model_cfg, kind, seed=cfg.seed, encoder=encoder,
                        f_tab=f_tab if kind == "treatnet" else None)
    tlog = _fit(model, train, val, cfg, drop_last=True)
    return model, tlog
