"""End-to-end glue: split, preprocess, train both phases, score on the paired test split."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingBank, TabularSurrogateEncoder
from .metrics import SPEC_TARGETS, ScoredSet, evaluate, select_threshold
from .model import Batch, FusionConfig, FusionModel, TabularModel
from .tabular import FeatureSchema, FittedScaler, PatientRecord, fit, split
from .train import TrainConfig, TrainLog, make_batch, subsample_paired, train_fusion, train_tabular

FUSION_KINDS = ("treatnet", "cross_attention_only", "video_only")
ALL_KINDS = ("treatnet", "cross_attention_only", "tabular_only", "video_only")


@dataclass
class Prepared:
    schema: FeatureSchema
    scaler: FittedScaler
    encoder: TabularSurrogateEncoder
    bank: EmbeddingBank
    full_train: list[PatientRecord]
    full_val: list[PatientRecord]
    full_test: list[PatientRecord]
    max_len: int

    @property
    def paired_train(self) -> list[PatientRecord]:
        return [r for r in self.full_train if r.study_id is not None]

    @property
    def paired_val(self) -> list[PatientRecord]:
        return [r for r in self.full_val if r.study_id is not None]

    @property
    def paired_test(self) -> list[PatientRecord]:
        return [r for r in self.full_test if r.study_id is not None]

    def tab_batch(self, records: Sequence[PatientRecord]) -> Batch:
        return make_batch(records, self.schema, self.scaler, self.encoder)

    def paired_batch(self, records: Sequence[PatientRecord]) -> Batch:
        return make_batch(records, self.schema, self.scaler, self.encoder, self.bank, self.max_len)


def make_encoder(schema: FeatureSchema, model_cfg: FusionConfig) -> TabularSurrogateEncoder:
    if schema.width != model_cfg.feature_width:
        raise ValueError(f"schema width {schema.width} does not match model feature_width {model_cfg.feature_width}")
    return TabularSurrogateEncoder(schema.width, model_cfg.tab_embed_dim, seed=model_cfg.encoder_seed)


def prepare(records: Sequence[PatientRecord], schema: FeatureSchema, bank: EmbeddingBank,
            model_cfg: FusionConfig | None = None, split_seed: int = 0,
            encoder: TabularSurrogateEncoder | None = None, scaler: FittedScaler | None = None) -> Prepared:
    """Split patients 70/10/20, fit the scaler on the training split, and build the encoder.

    ``model_cfg`` is only consulted when no ``encoder`` is supplied.
    """
    train, val, test = split(records, (0.7, 0.1, 0.2), seed=split_seed)
    if scaler is None:
        scaler = fit(schema, train)
    if encoder is None:
        if model_cfg is None:
            raise ValueError("prepare needs either an encoder or a model config")
        encoder = make_encoder(schema, model_cfg)
    max_len = max((len(v) for v in bank.studies.values()), default=1)
    return Prepared(schema, scaler, encoder, bank, train, val, test, max_len)


@dataclass
class SeedRun:
    seed: int
    models: dict
    logs: dict[str, TrainLog]


def run_seed(prep: Prepared, model_cfg: FusionConfig, tab_cfg: TrainConfig, fusion_cfg: TrainConfig,
             seed: int, kinds: Sequence[str] = ALL_KINDS, fraction: float = 1.0,
             f_tab_model: TabularModel | None = None) -> SeedRun:
    """Train the requested model kinds for one seed. The tabular head is trained first when needed."""
    models: dict = {}
    logs: dict[str, TrainLog] = {}
    need_tab = any(k in ("treatnet", "tabular_only") for k in kinds)
    if need_tab:
        if f_tab_model is None:
            f_tab_model, logs["tabular_only"] = train_tabular(
                prep.tab_batch(prep.full_train), prep.tab_batch(prep.full_val),
                replace(tab_cfg, seed=seed, phase="tabular"), prep.encoder, model_cfg.tab_hidden_dim)
        models["tabular_only"] = f_tab_model
    fusion_kinds = [k for k in kinds if k in FUSION_KINDS]
    if fusion_kinds:
        train_recs = prep.paired_train
        if fraction < 1.0:
            train_recs = subsample_paired(train_recs, fraction, seed=seed)
        tr = prep.paired_batch(train_recs)
        va = prep.paired_batch(prep.paired_val)
        for kind in fusion_kinds:
            models[kind], logs[kind] = train_fusion(
                tr, va, replace(fusion_cfg, seed=seed, phase="fusion"), model_cfg, prep.encoder,
                f_tab=f_tab_model.head if kind == "treatnet" else None, kind=kind)
    return SeedRun(seed, {k: models[k] for k in kinds if k in models}, logs)


def score(model, batch: Batch, tag: str = "", seed: int | None = None) -> ScoredSet:
    return ScoredSet(model.predict(batch), batch.y.astype(int), tag, seed)


def evaluate_model(model, val: Batch, test: Batch, spec_targets=SPEC_TARGETS) -> dict[str, float]:
    """Metrics on ``test`` with the balanced-accuracy threshold picked on ``val``."""
    threshold = select_threshold(score(model, val))
    return evaluate(score(model, test), threshold, spec_targets)
