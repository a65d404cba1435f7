"""Tabular preprocessing: robust scaling, one-hot and ordinal encoding, patient-level splits."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NUMERIC = "numeric"
ONE_HOT = "one_hot_categorical"
ORDINAL = "ordinal_categorical"
KINDS = (NUMERIC, ONE_HOT, ORDINAL)
QUANTILE_METHOD = "linear"


class SchemaError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == ONE_HOT else 1


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        for f in self.features:
            if f.kind not in KINDS:
                raise SchemaError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.kind != NUMERIC and len(f.categories) < 2:
                raise SchemaError(f"feature {f.name!r}: categorical needs >= 2 categories")
            if f.kind == NUMERIC and f.categories:
                raise SchemaError(f"feature {f.name!r}: numeric feature cannot list categories")

    @property
    def width(self) -> int:
        return sum(f.width for f in self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def numeric(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == NUMERIC]

    def to_dict(self) -> dict:
        return {
            "features": [
                {"name": f.name, "kind": f.kind, "categories": list(f.categories)}
                for f in self.features
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(
            FeatureSpec(f["name"], f["kind"], tuple(f.get("categories", ())))
            for f in d["features"]
        ))


@dataclass
class PatientRecord:
    patient_id: str
    values: dict
    label: int
    study_id: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"record {self.patient_id}: label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class ScalerStats:
    median: float
    iqr: float
    fallback_value: float


@dataclass
class FittedScaler:
    stats: "OrderedDict[str, ScalerStats]"
    quantile_method: str = QUANTILE_METHOD
    unseen_count: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "quantile_method": self.quantile_method,
            "numeric": {
                k: {"median": s.median, "iqr": s.iqr, "fallback_value": s.fallback_value}
                for k, s in self.stats.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedScaler":
        stats = OrderedDict(
            (k, ScalerStats(v["median"], v["iqr"], v["fallback_value"]))
            for k, v in d["numeric"].items()
        )
        return cls(stats, d.get("quantile_method", QUANTILE_METHOD))


def _is_missing(v) -> bool:
    return v is None or v == "" or (isinstance(v, float) and math.isnan(v))


def fit(schema: FeatureSchema, train_rows: Sequence[PatientRecord]) -> FittedScaler:
    """Median/IQR per numeric feature, from the training rows only."""
    if not train_rows:
        raise FitError("fit needs at least one training row")
    for f in schema.features:
        if f.kind == NUMERIC:
            continue
        allowed = set(f.categories)
        for r in train_rows:
            v = r.values.get(f.name)
            if not _is_missing(v) and str(v) not in allowed:
                raise SchemaError(f"feature {f.name!r}: unseen category {v!r}")
    stats = OrderedDict()
    for f in schema.numeric():
        col = np.array(
            [float(r.values[f.name]) for r in train_rows if not _is_missing(r.values.get(f.name))],
            dtype=np.float64,
        )
        if col.size == 0:
            raise FitError(f"feature {f.name!r}: every training value is missing")
        q1, med, q3 = np.quantile(col, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
        stats[f.name] = ScalerStats(float(med), float(q3 - q1), float(med))
    return FittedScaler(stats)


def transform(scaler: FittedScaler, schema: FeatureSchema, row: PatientRecord) -> np.ndarray:
    out = np.zeros(schema.width, dtype=np.float64)
    pos = 0
    for f in schema.features:
        v = row.values.get(f.name)
        if f.kind == NUMERIC:
            s = scaler.stats[f.name]
            x = s.fallback_value if _is_missing(v) else float(v)
            out[pos] = 0.0 if s.iqr == 0 else (x - s.median) / s.iqr
        elif f.kind == ONE_HOT:
            if not _is_missing(v):
                try:
                    out[pos + f.categories.index(str(v))] = 1.0
                except ValueError:
                    scaler.unseen_count += 1
        else:
            idx = -1.0
            if not _is_missing(v):
                try:
                    idx = float(f.categories.index(str(v)))
                except ValueError:
                    scaler.unseen_count += 1
            out[pos] = idx
        pos += f.width
    return out


def transform_many(scaler: FittedScaler, schema: FeatureSchema, rows: Iterable[PatientRecord]) -> np.ndarray:
    rows = list(rows)
    if not rows:
        return np.zeros((0, schema.width))
    return np.stack([transform(scaler, schema, r) for r in rows])


def split(
    records: Sequence[PatientRecord],
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Patient-exclusive train/val/test partition.

    Patients are grouped into strata by (has study, label), shuffled within
    each stratum, and dealt to buckets by largest running deficit. This keeps
    every stratum, and therefore the paired subset, close to the requested
    fractions while landing the totals within one patient of target.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    by_patient: "OrderedDict[str, list[PatientRecord]]" = OrderedDict()
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    n_buckets = sum(1 for f in fractions if f > 0)
    if len(by_patient) < n_buckets:
        raise ValueError(f"split needs at least {n_buckets} patients, got {len(by_patient)}")

    strata: dict[tuple[int, int], list[str]] = {}
    for pid, rows in by_patient.items():
        key = (int(any(r.study_id is not None for r in rows)), rows[0].label)
        strata.setdefault(key, []).append(pid)
    rng = np.random.default_rng(seed)
    ordered: list[str] = []
    for key in sorted(strata):
        ids = sorted(strata[key])
        ordered.extend(ids[i] for i in rng.permutation(len(ids)))

    frac = np.asarray(fractions, dtype=np.float64)
    counts = np.zeros(len(frac))
    buckets: list[list[PatientRecord]] = [[], [], []]
    for k, pid in enumerate(ordered, start=1):
        deficit = frac * k - counts
        j = int(np.argmax(deficit))
        counts[j] += 1
        buckets[j].extend(by_patient[pid])
    return buckets[0], buckets[1], buckets[2]


# ------------------------------------------------------------------ io


def save_preprocessing(path: str | Path, schema: FeatureSchema, scaler: FittedScaler | None = None) -> None:
    doc = {"schema": schema.to_dict()}
    if scaler is not None:
        doc["scaler"] = scaler.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_preprocessing(path: str | Path) -> tuple[FeatureSchema, FittedScaler | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    scaler = FittedScaler.from_dict(doc["scaler"]) if "scaler" in doc else None
    return FeatureSchema.from_dict(doc["schema"]), scaler


def _fmt(v) -> str:
    if _is_missing(v):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records_csv(path: str | Path, schema: FeatureSchema, records: Iterable[PatientRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "study_id", "label", *schema.names])
        for r in records:
            w.writerow([r.patient_id, r.study_id or "", r.label, *(_fmt(r.values.get(n)) for n in schema.names)])


def read_records_csv(path: str | Path, schema: FeatureSchema) -> list[PatientRecord]:
    kinds = {f.name: f.kind for f in schema.features}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in ["patient_id", "label", *schema.names] if n not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for row in reader:
            values = {}
            for name, kind in kinds.items():
                cell = row[name]
                if cell == "":
                    values[name] = None
                elif kind == NUMERIC:
                    values[name] = float(cell)
                else:
                    values[name] = cell
            out.append(PatientRecord(
                patient_id=row["patient_id"],
                values=values,
                label=int(row["label"]),
                study_id=row.get("study_id") or None,
            ))
    return out


def reference_schema() -> FeatureSchema:
    """Illustrative 37-wide schema built from the feature families of an ACS cohort."""
    yes_no = ("no", "yes")
    numeric = ["age", "bmi", "lvef", "heart_rate", "systolic_bp", "creatinine",
               "troponin", "hemoglobin", "glucose", "ldl"]
    binary = ["sex", "diabetes", "hypertension", "hyperlipidemia", "smoking",
              "peripheral_vascular", "cerebrovascular", "pulmonary"]
    ordinal = {
        "malignancy": yes_no,
        "heart_failure": yes_no,
        "prior_infarction": yes_no,
        "killip_class": ("I", "II", "III", "IV"),
        "nyha_class": ("I", "II", "III", "IV"),
        "smoking_status": ("never", "former", "current"),
        "angina_grade": ("none", "mild", "moderate", "severe"),
        "renal_stage": ("1", "2", "3", "4", "5"),
    }
    feats = [FeatureSpec(n, NUMERIC) for n in numeric]
    feats += [FeatureSpec(n, ONE_HOT, ("female", "male") if n == "sex" else yes_no) for n in binary]
    feats.append(FeatureSpec("diagnosis", ONE_HOT, ("STEMI", "NSTEMI", "UA")))
    feats += [FeatureSpec(n, ORDINAL, c) for n, c in ordinal.items()]
    return FeatureSchema(tuple(feats))
