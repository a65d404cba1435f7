"""Ranking and threshold metrics, seed aggregation, and the two-model agreement analysis.

Operating points use the rule "predict positive when score >= threshold".
The candidate thresholds are the distinct scores plus ``+inf`` (nothing
predicted positive).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

SPEC_TARGETS = (0.2, 0.4, 0.6)
# float slack when comparing a realized specificity against its target
SPEC_TOL = 1e-12


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    model: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length vectors")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _require_both(s: ScoredSet, what: str) -> None:
    if s.n_pos == 0 or s.n_neg == 0:
        raise UndefinedMetricError(f"{what} is undefined without both classes")


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney estimate: P(positive outranks negative), ties counted as one half."""
    _require_both(s, "AUROC")
    ranks = rankdata(s.scores, method="average")
    n1, n0 = s.n_pos, s.n_neg
    return float((ranks[s.labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_points(s: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, tp counts, fp counts), thresholds descending from ``+inf``."""
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    lab = s.labels[order]
    tps = np.cumsum(lab)
    fps = np.cumsum(1 - lab)
    # keep the last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(sc))[0], sc.size - 1] if sc.size else np.zeros(0, dtype=int)
    thr = np.r_[np.inf, sc[last]]
    return thr, np.r_[0, tps[last]], np.r_[0, fps[last]]


def confusion(s: ScoredSet, threshold: float) -> tuple[int, int, int, int]:
    pred = s.scores >= threshold
    tp = int(np.sum(pred & (s.labels == 1)))
    fp = int(np.sum(pred & (s.labels == 0)))
    fn = int(np.sum(~pred & (s.labels == 1)))
    tn = int(np.sum(~pred & (s.labels == 0)))
    return tp, fp, fn, tn


def balanced_accuracy(s: ScoredSet, threshold: float) -> float:
    _require_both(s, "balanced accuracy")
    tp, fp, fn, tn = confusion(s, threshold)
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


def select_threshold(s: ScoredSet) -> float:
    """Threshold maximizing balanced accuracy; ties go to the highest threshold."""
    _require_both(s, "threshold selection")
    thr, tp, fp = roc_points(s)
    # 2 * n_pos * n_neg * bacc, kept in integers so exact ties stay ties
    scaled = tp * s.n_neg + (s.n_neg - fp) * s.n_pos
    return float(thr[int(np.argmax(scaled))])


def operating_point(s: ScoredSet, target_spec: float) -> tuple[float, float, float]:
    """(threshold, sensitivity, specificity) with max sensitivity among points meeting the specificity target.

    Among equally sensitive points the highest threshold wins.
    """
    if s.n_neg == 0:
        raise UndefinedMetricError("specificity is undefined without negatives")
    if s.n_pos == 0:
        raise UndefinedMetricError("sensitivity is undefined without positives")
    thr, tp, fp = roc_points(s)
    spec = 1.0 - fp / s.n_neg
    sens = tp / s.n_pos
    ok = spec >= target_spec - SPEC_TOL
    best = np.max(sens[ok])
    i = int(np.nonzero(ok & (sens == best))[0][0])
    return float(thr[i]), float(sens[i]), float(spec[i])


def sensitivity_at_specificity(s: ScoredSet, target_spec: float) -> float:
    return operating_point(s, target_spec)[1]


@dataclass
class Agreement:
    n_agree: int
    acc_class0: float | None
    acc_class1: float | None
    threshold_a: float
    threshold_b: float

    def to_dict(self) -> dict:
        return {
            "n_agree": self.n_agree,
            "acc_class0": self.acc_class0,
            "acc_class1": self.acc_class1,
            "threshold_a": self.threshold_a,
            "threshold_b": self.threshold_b,
        }


def agreement_analysis(a: ScoredSet, b: ScoredSet, target_spec: float = 0.4) -> Agreement:
    """Per-class accuracy on the samples where both models predict the same class.

    Each model is thresholded at its own operating point for ``target_spec``.
    ``acc_class{k}`` is the fraction of agreed samples with true label k that
    were predicted k; it is ``None`` when no such sample exists.
    """
    if a.labels.shape != b.labels.shape or not np.array_equal(a.labels, b.labels):
        raise ValueError("agreement analysis needs both models scored on the same samples")
    ta = operating_point(a, target_spec)[0]
    tb = operating_point(b, target_spec)[0]
    pa = a.scores >= ta
    pb = b.scores >= tb
    agree = pa == pb
    accs = []
    for k in (0, 1):
        sel = agree & (a.labels == k)
        accs.append(float(np.mean(pa[sel] == bool(k))) if sel.any() else None)
    return Agreement(int(agree.sum()), accs[0], accs[1], ta, tb)


# ------------------------------------------------------------------ reports


def metric_names(spec_targets: Sequence[float] = SPEC_TARGETS) -> list[str]:
    return ["auroc", "bacc"] + [f"sens@spec{t:g}" for t in spec_targets]


def evaluate(test: ScoredSet, threshold: float, spec_targets: Sequence[float] = SPEC_TARGETS) -> dict[str, float]:
    out = {"auroc": auroc(test), "bacc": balanced_accuracy(test, threshold)}
    for t in spec_targets:
        out[f"sens@spec{t:g}"] = sensitivity_at_specificity(test, t)
    return out


def aggregate_seeds(fragments: Sequence[dict[str, float]]) -> dict[str, dict[str, float | None]]:
    """Mean and sample standard deviation per metric across seeds."""
    if not fragments:
        raise ValueError("nothing to aggregate")
    out = {}
    for k in fragments[0]:
        v = np.array([f[k] for f in fragments], dtype=np.float64)
        out[k] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else None, "n": int(v.size)}
    return out


@dataclass
class EvalReport:
    model: str
    seeds: list[int] = field(default_factory=list)
    per_seed: list[dict[str, float]] = field(default_factory=list)

    def add(self, seed: int, metrics: dict[str, float]) -> None:
        self.seeds.append(seed)
        self.per_seed.append(metrics)

    def summary(self) -> dict:
        return aggregate_seeds(self.per_seed)

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = []
        for seed, frag in zip(self.seeds, self.per_seed):
            out += [(self.model, str(seed), k, v) for k, v in frag.items()]
        for k, agg in self.summary().items():
            out.append((self.model, "mean", k, agg["mean"]))
            out.append((self.model, "std", k, agg["std"] if agg["std"] is not None else math.nan))
        return out


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, stem: str = "eval_report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "metric", "value"])
        for r in reports:
            for model, seed, metric, value in r.rows():
                w.writerow([model, seed, metric, repr(float(value))])
    json_path = out_dir / f"{stem}.json"
    doc = {r.model: {"seeds": r.seeds, "per_seed": r.per_seed, "summary": r.summary()} for r in reports}
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def write_roc_csv(s: ScoredSet, path: str | Path) -> None:
    thr, tp, fp = roc_points(s)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, a, b in zip(thr, fp / max(s.n_neg, 1), tp / max(s.n_pos, 1)):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
