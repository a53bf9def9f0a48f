"""Anomaly benchmarks, ROC/AUC and threshold sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .coco import ANOMALY, NORMAL, ObjectPatch
from .errors import ConfigurationError, ValidationError
from .models import ModelBundle
from .scoring import ScoreReport, detect

# AUC x 100 on the single-class COCO benchmark (orange as the normal class)
REFERENCE_AUC = {"AE": 57.49, "CAE": 58.89, "CVAE": 57.18, "MemCAE": 60.94}
SINGLE_CLASS_NORMAL = ("orange",)
MULTI_CLASS_NORMAL = ("orange", "banana", "apple", "broccoli", "carrot")


@dataclass
class EvalDataset:
    normal_categories: frozenset[int]
    anomaly_categories: frozenset[int]
    samples: list[ObjectPatch]
    sample_budget: int
    seed: int = 0

    def __post_init__(self):
        if self.normal_categories & self.anomaly_categories:
            raise ValidationError("normal and anomaly category sets overlap")

    @property
    def labels(self) -> np.ndarray:
        """1 for anomalies (positives), 0 for normal samples."""
        return np.array([p.label == ANOMALY for p in self.samples], dtype=int)

    @property
    def anomaly_ratio(self) -> float:
        return float(self.labels.mean()) if self.samples else 0.0


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def trapezoid_area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def build_eval_set(patches: Sequence[ObjectPatch], normal_categories: Iterable[int], budget: int,
                   seed: int = 0, anomaly_categories: Iterable[int] | None = None) -> EvalDataset:
    """Sample ``budget`` patches, keeping the source normal:anomaly ratio, and label them.

    Anomaly categories default to every category present that is not normal.
    """
    normal = frozenset(normal_categories)
    if anomaly_categories is None:
        anomaly = frozenset(p.category_id for p in patches) - normal
    else:
        anomaly = frozenset(anomaly_categories)
    normals = [p for p in patches if p.category_id in normal]
    anomalies = [p for p in patches if p.category_id in anomaly]
    if not normals or not anomalies:
        raise ValidationError(f"need both normal and anomalous patches, got {len(normals)} and {len(anomalies)}")
    if budget < 2:
        raise ValidationError("budget must allow at least one sample per side")
    total = len(normals) + len(anomalies)
    budget = min(budget, total)
    n_norm = int(math.floor(budget * len(normals) / total + 0.5))
    n_norm = min(max(n_norm, 1), len(normals), budget - 1)
    n_anom = min(budget - n_norm, len(anomalies))
    n_norm = budget - n_anom
    rng = np.random.default_rng(seed)
    pick_n = sorted(rng.choice(len(normals), n_norm, replace=False))
    pick_a = sorted(rng.choice(len(anomalies), n_anom, replace=False))
    samples = [replace(normals[i], label=NORMAL) for i in pick_n] + \
              [replace(anomalies[i], label=ANOMALY) for i in pick_a]
    return EvalDataset(normal, anomaly, samples, budget, seed)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC curve over all distinct thresholds; AUC from the rank statistic with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(lab)[last_of_group]
    fp = np.cumsum(~lab)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(fpr, tpr, thresholds, float(auc))


@dataclass
class SweepRow:
    gamma: float
    accuracy: float
    balanced_accuracy: float


def threshold_sweep(report: ScoreReport, labels: Mapping[str, int] | Sequence[int]) -> tuple[float, list[SweepRow]]:
    """Try every distinct normalized score as ``gamma``; return the best by balanced accuracy (ties: smaller gamma)."""
    if isinstance(labels, Mapping):
        try:
            y = np.array([int(labels[s.patch_id]) for s in report.samples], dtype=bool)
        except KeyError as exc:
            raise ValidationError(f"no label for sample {exc.args[0]}") from None
    else:
        y = np.asarray(labels).astype(bool)
        if y.size != len(report.samples):
            raise ValidationError(f"{y.size} labels for {len(report.samples)} scored samples")
    scores = report.scores()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    rows = []
    for g in np.unique(scores):
        flagged = scores > g
        tp = int((flagged & y).sum())
        tn = int((~flagged & ~y).sum())
        parts = []
        if n_pos:
            parts.append(tp / n_pos)
        if n_neg:
            parts.append(tn / n_neg)
        rows.append(SweepRow(float(g), (tp + tn) / y.size, float(np.mean(parts))))
    best = max(rows, key=lambda r: (r.balanced_accuracy, -r.gamma))
    return best.gamma, rows


@dataclass
class AucRow:
    model_id: str
    kind: str
    auc: float
    best_gamma: float
    best_balanced_accuracy: float
    roc: RocCurve = field(repr=False)
    report: ScoreReport = field(repr=False)


def compare_models(bundles: Sequence[ModelBundle], eval_set: EvalDataset,
                   names: Sequence[str] | None = None, alpha: float | None = None) -> list[AucRow]:
    """Score the evaluation set with each model, in the order given."""
    names = list(names) if names is not None else [b.kind for b in bundles]
    if len(names) != len(bundles):
        raise ValidationError("one name per model required")
    size = eval_set.samples[0].pixels.shape
    labels = eval_set.labels
    rows = []
    for name, bundle in zip(names, bundles):
        d = bundle.descriptor
        if (d.patch_size, d.patch_size, d.channels) != size:
            raise ConfigurationError(f"model {name} expects {d.patch_size}px patches, evaluation set has {size}")
        report = detect(bundle, eval_set.samples, alpha=alpha, model_id=name)
        roc = roc_auc(report.raw(), labels)
        gamma, sweep = threshold_sweep(report, labels)
        best = next(r for r in sweep if r.gamma == gamma)
        rows.append(AucRow(name, bundle.kind, roc.auc, gamma, best.balanced_accuracy, roc, report))
    return rows


@dataclass
class AggregateRow:
    kind: str
    mean_auc: float
    min_auc: float
    max_auc: float
    runs: int


def aggregate(tables: Sequence[Sequence[AucRow]]) -> list[AggregateRow]:
    """Mean and range of AUC per model kind across repeated runs (e.g. seeds)."""
    by_kind: dict[str, list[float]] = {}
    for table in tables:
        for row in table:
            by_kind.setdefault(row.kind, []).append(row.auc)
    return [AggregateRow(k, float(np.mean(v)), float(min(v)), float(max(v)), len(v)) for k, v in by_kind.items()]


def format_table(rows: Sequence[AucRow], reference: Mapping[str, float] | None = None) -> str:
    """Aligned plain-text table of AUC x 100, optionally beside reference values."""
    head = ["Model", "AUC", "best gamma", "bal. acc."] + (["reference"] if reference else [])
    body = []
    for r in rows:
        line = [r.model_id, f"{100 * r.auc:.2f}", f"{r.best_gamma:.4f}", f"{r.best_balanced_accuracy:.4f}"]
        if reference:
            ref = reference.get(r.kind)
            line.append("" if ref is None else f"{ref:.2f}")
        body.append(line)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(head), rule] + [fmt(b) for b in body])


def write_table_csv(rows: Sequence[AucRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "kind", "auc", "best_gamma", "best_balanced_accuracy"])
        for r in rows:
            w.writerow([r.model_id, r.kind, repr(r.auc), repr(r.best_gamma), repr(r.best_balanced_accuracy)])
    return path


def write_roc_csv(curve: RocCurve, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for f, t in zip(curve.fpr, curve.tpr):
            w.writerow([repr(float(f)), repr(float(t))])
    return path
