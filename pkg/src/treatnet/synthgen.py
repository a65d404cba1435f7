"""Seeded two-factor generator for tabular-only and paired tabular+video cohorts.

A shared risk factor ``u`` drives the tabular features and the videos; a
video-only factor ``w`` reaches the label only through the videos. The label
is ``Bernoulli(sigmoid(alpha * ((1 - lam) * u + lam * w) + c))`` with the
intercept ``c`` tuned to a target prevalence.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .embeddings import EmbeddingBank, save_bank
from .tabular import NUMERIC, FeatureSchema, PatientRecord, reference_schema, save_preprocessing, write_records_csv

VIEWS = ("AP2", "AP4", "PLAX")


class TuningError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_full: int = 10_000
    n_paired: int = 1_500
    L_min: int = 1
    L_max: int = 8
    embed_width: int = 512
    prevalence_target: float = 0.78
    paired_prevalence_target: float = 0.82
    signal_split: float = 0.4
    alpha: float = 2.0
    tab_loading: float = 1.0
    tab_noise: float = 1.5
    video_signal: float = 1.0
    video_noise: float = 1.0
    missing_rate: float = 0.02
    seed: int = 17
    schema: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.signal_split <= 1.0:
            raise ValueError("signal_split must lie in [0, 1]")
        for name in ("prevalence_target", "paired_prevalence_target"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 <= self.n_paired <= self.n_full:
            raise ValueError("n_paired must lie in [0, n_full]")
        if not 1 <= self.L_min <= self.L_max:
            raise ValueError("need 1 <= L_min <= L_max")

    def feature_schema(self) -> FeatureSchema:
        return reference_schema() if self.schema is None else FeatureSchema.from_dict(self.schema)


@dataclass
class Cohort:
    records: list[PatientRecord]
    bank: EmbeddingBank
    schema: FeatureSchema
    config: GenConfig
    intercept: float
    latent_u: np.ndarray
    latent_w: np.ndarray

    @property
    def paired(self) -> list[PatientRecord]:
        return [r for r in self.records if r.study_id is not None]


def tune_intercept(alpha: float, lam: float, target_prev: float, seed: int = 0,
                   n: int = 100_000, tol: float = 1e-4, max_steps: int = 100) -> float:
    """Bisection on the Monte-Carlo prevalence ``mean(sigmoid(alpha * s + c))``."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    w = rng.standard_normal(n)
    s = alpha * ((1.0 - lam) * u + lam * w)
    lo, hi = -30.0, 30.0
    for _ in range(max_steps):
        c = 0.5 * (lo + hi)
        prev = float(expit(s + c).mean())
        if abs(prev - target_prev) < tol:
            return c
        if prev < target_prev:
            lo = c
        else:
            hi = c
    raise TuningError(f"intercept search did not reach prevalence {target_prev} in {max_steps} steps")


def _categorize(latent: np.ndarray, k: int) -> np.ndarray:
    cuts = norm.ppf(np.arange(1, k) / k)
    return np.digitize(latent / latent.std(), cuts)


def generate(cfg: GenConfig) -> Cohort:
    schema = cfg.feature_schema()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_full
    u = rng.standard_normal(n)
    w = rng.standard_normal(n)
    c = tune_intercept(cfg.alpha, cfg.signal_split, cfg.prevalence_target, seed=cfg.seed + 1)
    p = expit(cfg.alpha * ((1.0 - cfg.signal_split) * u + cfg.signal_split * w) + c)
    y = (rng.random(n) < p).astype(int)

    columns: dict[str, list] = {}
    for f in schema.features:
        loading = cfg.tab_loading * rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        latent = loading * u + cfg.tab_noise * rng.standard_normal(n)
        if f.kind == NUMERIC:
            center = rng.uniform(-50.0, 150.0)
            spread = rng.uniform(1.0, 20.0)
            col = [round(float(v), 4) for v in center + spread * latent]
        else:
            codes = _categorize(latent, len(f.categories))
            col = [f.categories[i] for i in codes]
        missing = rng.random(n) < cfg.missing_rate
        columns[f.name] = [None if m else v for v, m in zip(col, missing)]

    pos = np.nonzero(y == 1)[0]
    neg = np.nonzero(y == 0)[0]
    k_pos = int(round(cfg.paired_prevalence_target * cfg.n_paired))
    k_neg = cfg.n_paired - k_pos
    if k_pos > pos.size or k_neg > neg.size:
        raise ValueError("not enough patients of each class for the paired subset")
    paired = np.sort(np.r_[rng.choice(pos, k_pos, replace=False), rng.choice(neg, k_neg, replace=False)])
    is_paired = np.zeros(n, dtype=bool)
    is_paired[paired] = True

    width = cfg.embed_width
    directions = rng.standard_normal((len(VIEWS), width))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    offsets = 0.5 * rng.standard_normal((len(VIEWS), width))
    bank = EmbeddingBank(width)
    for i in paired:
        L = int(rng.integers(cfg.L_min, cfg.L_max + 1))
        views = rng.integers(0, len(VIEWS), size=L)
        signal = cfg.video_signal * (u[i] + w[i])
        rows = offsets[views] + signal * directions[views] + cfg.video_noise * rng.standard_normal((L, width))
        bank.add(f"S{i:06d}", rows, [VIEWS[v] for v in views])

    records = [
        PatientRecord(
            patient_id=f"P{i:06d}",
            values={name: columns[name][i] for name in schema.names},
            label=int(y[i]),
            study_id=f"S{i:06d}" if is_paired[i] else None,
        )
        for i in range(n)
    ]
    return Cohort(records, bank, schema, cfg, c, u, w)


RECORDS_CSV = "records.csv"
BANK_FILE = "bank.treb"
SCHEMA_JSON = "schema.json"
GEN_CONFIG_JSON = "gen_config.json"


def write_cohort(cohort: Cohort, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / RECORDS_CSV, cohort.schema, cohort.records)
    save_bank(cohort.bank, out / BANK_FILE)
    save_preprocessing(out / SCHEMA_JSON, cohort.schema)
    doc = {"config": asdict(cohort.config), "intercept": cohort.intercept}
    (out / GEN_CONFIG_JSON).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
