"""Multi-seed experiments shared by the CLI, the scripts/ runners and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .metrics import EvalReport
from .model import FusionConfig, TabularModel
from .pipeline import ALL_KINDS, Prepared, evaluate_model, prepare, run_seed
from .synthgen import Cohort, generate
from .train import subsample_paired, train_fusion, train_tabular


def prepare_cohort(cfg: RunConfig, cohort: Cohort | None = None) -> tuple[Prepared, FusionConfig]:
    cohort = generate(cfg.gen) if cohort is None else cohort
    mc = replace(cfg.model, feature_width=cohort.schema.width)
    if cohort.bank.width != mc.d:
        raise ValueError(f"embedding width mismatch: model d={mc.d}, bank has {cohort.bank.width}")
    return prepare(cohort.records, cohort.schema, cohort.bank, mc, cfg.eval.split_seed), mc


def _metrics(prep: Prepared, model, spec_targets: Sequence[float]) -> dict[str, float]:
    build = prep.tab_batch if isinstance(model, TabularModel) else prep.paired_batch
    return evaluate_model(model, build(prep.paired_val), build(prep.paired_test), tuple(spec_targets))


def ordering_study(cfg: RunConfig, prep: Prepared, mc: FusionConfig, kinds: Sequence[str] = ALL_KINDS,
                   seeds: Sequence[int] | None = None, log=None) -> dict[str, EvalReport]:
    """Train every model kind for each seed and score it on the paired test split."""
    reports = {k: EvalReport(k) for k in kinds}
    for seed in cfg.eval.seeds if seeds is None else seeds:
        run = run_seed(prep, mc, cfg.tabular_train(), cfg.fusion_train(), seed, kinds)
        for kind in kinds:
            metrics = _metrics(prep, run.models[kind], cfg.eval.spec_targets)
            reports[kind].add(seed, metrics)
            if log:
                log(f"seed {seed} {kind}: auroc {metrics['auroc']:.4f} bacc {metrics['bacc']:.4f}")
    return reports


@dataclass(frozen=True)
class EfficiencyRow:
    model: str
    fraction: float
    seed: int
    n_train: int
    auroc: float
    bacc: float


def data_efficiency(cfg: RunConfig, prep: Prepared, mc: FusionConfig, fractions: Sequence[float],
                    kinds: Sequence[str] = ("treatnet", "video_only"), seeds: Sequence[int] | None = None,
                    log=None) -> list[EfficiencyRow]:
    """Retrain the fusion models on nested fractions of the paired training split."""
    val_b = prep.paired_batch(prep.paired_val)
    test_b = prep.paired_batch(prep.paired_test)
    rows = []
    for seed in cfg.eval.seeds if seeds is None else seeds:
        tab, _ = train_tabular(prep.tab_batch(prep.full_train), prep.tab_batch(prep.full_val),
                               replace(cfg.tabular_train(), seed=seed), prep.encoder, mc.tab_hidden_dim)
        for frac in fractions:
            recs = prep.paired_train if frac >= 1.0 else subsample_paired(prep.paired_train, frac, seed=seed)
            train_b = prep.paired_batch(recs)
            for kind in kinds:
                if kind == "tabular_only":
                    metrics = _metrics(prep, tab, cfg.eval.spec_targets)
                else:
                    m, _ = train_fusion(train_b, val_b, replace(cfg.fusion_train(), seed=seed), mc,
                                        prep.encoder, tab.head, kind=kind)
                    metrics = evaluate_model(m, val_b, test_b, tuple(cfg.eval.spec_targets))
                rows.append(EfficiencyRow(kind, float(frac), seed, len(recs), metrics["auroc"], metrics["bacc"]))
                if log:
                    log(f"seed {seed} fraction {frac:g} {kind}: bacc {metrics['bacc']:.4f}")
    return rows


def mean_by(rows: Sequence[EfficiencyRow], model: str, fraction: float, field: str = "bacc") -> float:
    sel = [getattr(r, field) for r in rows if r.model == model and r.fraction == fraction]
    if not sel:
        raise KeyError(f"no rows for {model} at fraction {fraction}")
    return float(np.mean(sel))
