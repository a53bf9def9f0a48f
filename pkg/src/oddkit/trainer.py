"""Adam optimization loop with online augmentation, validation tracking and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .coco import AugmentationPolicy, DatasetSplit, ObjectPatch, augment, stack_pixels
from .errors import TrainingError, ValidationError
from .models import ModelBundle, load_bundle, save_bundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    validate_every: int = 100
    checkpoint_every: int = 0  # 0: final checkpoint only
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch normalization needs two samples)")
        if self.validate_every < 1 or self.checkpoint_every < 0:
            raise ValidationError("validate_every must be >= 1 and checkpoint_every >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig, t: int) -> AdamState:
    """One bias-corrected Adam update, in place. ``t`` counts from 1."""
    if t < 1:
        raise ValidationError("Adam step index starts at 1")
    for path in params:
        if path not in grads:
            raise ValidationError(f"no gradient for parameter {path}")
        if not np.all(np.isfinite(grads[path])):
            raise TrainingError(f"non-finite gradient in parameter {path}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for path, p in params.items():
        g = grads[path]
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[path], state.v[path] = m, v
        p.data = p.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
    state.t = t
    return state


@dataclass
class MetricRecord:
    step: int
    train_loss: float
    train_recon: float
    val_loss: float | None = None
    val_recon: float | None = None
    wall_time_s: float = 0.0


METRIC_FIELDS = ("step", "train_loss", "val_loss", "wall_time_s", "train_recon", "val_recon")


@dataclass
class MetricLog:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, rec: MetricRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValidationError("metric steps must be strictly increasing")
        if not math.isfinite(rec.train_loss):
            raise ValidationError("metric losses must be finite")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def steps(self) -> list[int]:
        return [r.step for r in self.records]

    def validation_curve(self) -> list[tuple[int, float]]:
        return [(r.step, r.val_recon) for r in self.records if r.val_recon is not None]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            for r in self.records:
                w.writerow([r.step, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss),
                            repr(r.wall_time_s), repr(r.train_recon),
                            "" if r.val_recon is None else repr(r.val_recon)])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                opt = lambda s: None if s == "" else float(s)  # noqa: E731
                out.append(MetricRecord(int(row["step"]), float(row["train_loss"]), float(row["train_recon"]),
                                        opt(row["val_loss"]), opt(row["val_recon"]), float(row["wall_time_s"])))
        return out

    def write_plot_data(self, path: str | Path) -> Path:
        """Whitespace-separated columns for gnuplot; missing values are ``NaN``."""
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("# step train_loss train_recon val_loss val_recon\n")
            for r in self.records:
                vals = [r.train_loss, r.train_recon, r.val_loss, r.val_recon]
                fh.write(f"{r.step} " + " ".join("NaN" if v is None else repr(v) for v in vals) + "\n")
        return path


@dataclass
class TrainResult:
    model: ModelBundle
    log: MetricLog
    optimizer: AdamState
    checkpoints: list[Path] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> list[tuple[int, int]]:
    """``(patch index, epoch)`` pairs for ``step`` of a stream of per-epoch reshuffles."""
    out = []
    perms: dict[int, np.ndarray] = {}
    for i in range((step - 1) * batch_size, step * batch_size):
        epoch, pos = divmod(i, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append((int(perms[epoch][pos]), epoch))
    return out


def evaluate_loss(model: ModelBundle, patches: Sequence[ObjectPatch], batch_size: int = 64) -> tuple[float, float]:
    """Mean total objective and mean reconstruction error, inference mode, no augmentation."""
    total = recon = 0.0
    with ad.no_grad():
        for i in range(0, len(patches), batch_size):
            x = stack_pixels(patches[i: i + batch_size], model.dtype)
            parts = model.loss(x, model.forward(x, training=False))
            total += float(parts.total.data) * len(x)
            recon += float(parts.reconstruction.data.sum())
    n = len(patches)
    return total / n, recon / n


def optimizer_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out[f"adam.m.{k}"] = state.m[k]
        out[f"adam.v.{k}"] = state.v[k]
    return out


def save_checkpoint(path: str | Path, model: ModelBundle, state: AdamState, config: TrainConfig,
                    log_: MetricLog | None = None) -> Path:
    meta = {"step": state.t, "train_config": asdict(config)}
    return save_bundle(path, model, meta, optimizer_tensors(state))


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, AdamState, dict]:
    model, meta, extra = load_bundle(path)
    state = AdamState(t=int(meta.get("step", 0)))
    for k, v in extra.items():
        if k.startswith("adam.m."):
            state.m[k[len("adam.m."):]] = v
        elif k.startswith("adam.v."):
            state.v[k[len("adam.v."):]] = v
    return model, state, meta


def train(model: ModelBundle, split: DatasetSplit, policy: AugmentationPolicy | None, config: TrainConfig,
          out_dir: str | Path | None = None, state: AdamState | None = None,
          metric_log: MetricLog | None = None) -> TrainResult:
    """Run optimizer steps ``state.t + 1 .. config.steps``.

    Batches come from a per-epoch reshuffled stream of ``split.train``; each
    patch gets one fresh augmentation draw per epoch. Validation loss is
    recorded every ``validate_every`` steps and at the last step. Passing the
    ``state`` of a loaded checkpoint resumes training exactly.
    """
    train_set = split.train
    if not train_set:
        raise ValidationError("training split is empty")
    size = model.descriptor.patch_size
    if train_set[0].pixels.shape != (size, size, model.descriptor.channels):
        raise ValidationError(f"patches of shape {train_set[0].pixels.shape} do not fit a {size}px model")
    state = state or AdamState()
    metric_log = metric_log or MetricLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []
    start = time.perf_counter()
    last_good: Path | None = None

    for t in range(state.t + 1, config.steps + 1):
        picks = batch_indices(len(train_set), config.batch_size, t, config.seed)
        batch = [train_set[i] if policy is None else augment(train_set[i], policy, epoch) for i, epoch in picks]
        x = stack_pixels(batch, model.dtype)
        rng = np.random.default_rng([config.seed, 1, t])
        fwd = model.forward(x, training=True, rng=rng)
        parts = model.loss(x, fwd)
        loss = float(parts.total.data)
        if not math.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {t}; last good checkpoint: {last_good}")
        grads = ad.backward(parts.total, model.params)
        adam_step(model.params, grads, state, config, t)

        rec = MetricRecord(t, loss, float(parts.reconstruction.data.mean()))
        if split.validation and (t % config.validate_every == 0 or t == config.steps or t == 1):
            rec.val_loss, rec.val_recon = evaluate_loss(model, split.validation)
        rec.wall_time_s = 0.0 if config.deterministic else round(time.perf_counter() - start, 6)
        metric_log.append(rec)

        if out_dir is not None and config.checkpoint_every and t % config.checkpoint_every == 0:
            last_good = save_checkpoint(out_dir / f"checkpoint_{t:06d}.odk", model, state, config)
            checkpoints.append(last_good)

    if out_dir is not None:
        checkpoints.append(save_checkpoint(out_dir / "final.odk", model, state, config))
        metric_log.write_csv(out_dir / "metrics.csv")
    return TrainResult(model, metric_log, state, checkpoints)
