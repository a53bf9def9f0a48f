"""Reconstruction-error anomaly scores, min-max normalization, threshold verdicts and rankings."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .coco import ObjectPatch, stack_pixels
from .errors import ConfigurationError, ValidationError
from .models import ModelBundle, build

DEFAULT_GAMMA = 0.9
ANOMALY_VERDICT, NORMAL_VERDICT = "anomaly", "normal"


@dataclass(frozen=True)
class ScoredSample:
    patch_id: str
    raw_error: float
    normalized_score: float
    verdict: str


@dataclass
class ScoreReport:
    model_id: str
    gamma: float
    alpha: float
    samples: list[ScoredSample]
    normalization: str = "min_max"
    normalized_over: str = "scored set"
    extra: dict = field(default_factory=dict)

    @property
    def flagged(self) -> list[ScoredSample]:
        return [s for s in self.samples if s.verdict == ANOMALY_VERDICT]

    def scores(self) -> np.ndarray:
        return np.array([s.normalized_score for s in self.samples])

    def raw(self) -> np.ndarray:
        return np.array([s.raw_error for s in self.samples])


def raw_errors(model: ModelBundle, patches: Sequence[ObjectPatch], alpha: float | None = None,
               batch_size: int = 64) -> np.ndarray:
    """Squared reconstruction error per patch, plus ``alpha`` times the summed attention entropy for MemCAE.

    Inference mode throughout; CVAE decodes its posterior mean.
    """
    if alpha is None:
        alpha = model.descriptor.entropy_alpha
    out = []
    with ad.no_grad():
        for i in range(0, len(patches), batch_size):
            x = stack_pixels(patches[i: i + batch_size], model.dtype)
            fwd = model.forward(x, training=False)
            err = ((x.astype(np.float64) - fwd.x_hat.data) ** 2).sum(axis=(1, 2, 3))
            if model.kind == "MemCAE" and alpha:
                ent = ad.entropy(fwd.memory.w_hat).data.astype(np.float64).reshape(len(x), -1).sum(axis=1)
                err = err + alpha * ent
            out.append(err)
    return np.concatenate(out) if out else np.zeros(0)


def raw_error(model: ModelBundle, patch: ObjectPatch, alpha: float | None = None) -> float:
    return float(raw_errors(model, [patch], alpha)[0])


def normalize_scores(raw: Sequence[float]) -> np.ndarray:
    """Min-max map onto [0, 1]; a constant list maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValidationError("cannot normalize an empty score list")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def verdicts(normalized: np.ndarray, gamma: float) -> list[str]:
    return [ANOMALY_VERDICT if s > gamma else NORMAL_VERDICT for s in normalized]


def report_from_errors(patch_ids: Sequence[str], raw: Sequence[float], gamma: float = DEFAULT_GAMMA,
                       alpha: float = 0.0, model_id: str = "model") -> ScoreReport:
    raw = np.asarray(raw, dtype=np.float64)
    norm = normalize_scores(raw)
    samples = [ScoredSample(pid, float(r), float(s), v)
               for pid, r, s, v in zip(patch_ids, raw, norm, verdicts(norm, gamma))]
    return ScoreReport(model_id, gamma, alpha, samples)


def _check_trained(model: ModelBundle):
    expected = build(model.descriptor, 0).params
    missing = [k for k in expected if k not in model.params]
    if missing:
        raise ConfigurationError(f"model is missing parameters: {', '.join(missing[:5])}")


def detect(model: ModelBundle, patches: Sequence[ObjectPatch], gamma: float = DEFAULT_GAMMA,
           alpha: float | None = None, model_id: str | None = None) -> ScoreReport:
    """Score every patch, normalize jointly, flag those whose normalized score exceeds ``gamma``."""
    if not patches:
        raise ValidationError("cannot score an empty dataset")
    _check_trained(model)
    if alpha is None:
        alpha = model.descriptor.entropy_alpha if model.kind == "MemCAE" else 0.0
    raw = raw_errors(model, patches, alpha)
    return report_from_errors([p.patch_id for p in patches], raw, gamma, alpha, model_id or model.kind)


def rank_extremes(report: ScoreReport, k: int = 5) -> tuple[list[ScoredSample], list[ScoredSample]]:
    """The ``k`` highest-scoring and ``k`` lowest-scoring samples; ties go to the smaller patch_id."""
    if k < 0 or k > len(report.samples):
        raise ValidationError(f"k={k} outside 0..{len(report.samples)}")
    top = sorted(report.samples, key=lambda s: (-s.raw_error, s.patch_id))[:k]
    bottom = sorted(report.samples, key=lambda s: (s.raw_error, s.patch_id))[:k]
    return top, bottom


# ---------------------------------------------------------------- files

REPORT_FIELDS = ("patch_id", "raw_error", "normalized_score", "verdict")


def write_report_csv(report: ScoreReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# model_id: {report.model_id}\n")
        fh.write(f"# gamma: {report.gamma!r}\n")
        fh.write(f"# alpha: {report.alpha!r}\n")
        fh.write(f"# normalization: {report.normalization} over {report.normalized_over}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for s in report.samples:
            w.writerow([s.patch_id, repr(s.raw_error), repr(s.normalized_score), s.verdict])
    return path


def read_report_csv(path: str | Path) -> ScoreReport:
    header: dict[str, str] = {}
    rows = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            header[key] = value
        else:
            body.append(line)
    for row in csv.DictReader(body):
        rows.append(ScoredSample(row["patch_id"], float(row["raw_error"]), float(row["normalized_score"]),
                                 row["verdict"]))
    norm, _, over = header.get("normalization", "min_max over scored set").partition(" over ")
    return ScoreReport(header.get("model_id", ""), float(header.get("gamma", DEFAULT_GAMMA)),
                       float(header.get("alpha", 0.0)), rows, norm, over or "scored set")


def contact_sheet(images: Sequence[np.ndarray], path: str | Path, pad: int = 2) -> Path:
    """Write a one-row PNG grid of ``[S, S, 3]`` images in [0, 1]."""
    from PIL import Image

    path = Path(path)
    if not images:
        raise ValidationError("contact sheet needs at least one image")
    s = images[0].shape[0]
    sheet = np.ones((s + 2 * pad, len(images) * (s + pad) + pad, 3))
    for i, img in enumerate(images):
        x = pad + i * (s + pad)
        sheet[pad: pad + s, x: x + s] = img
    Image.fromarray(np.round(np.clip(sheet, 0, 1) * 255).astype(np.uint8)).save(path)
    return path
