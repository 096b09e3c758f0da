"""Training loop, IoU metrics and evaluation reports."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Sample
from .net import Model
from .optim import DEFAULT_DECAY, DEFAULT_EPS, rmsprop_step
from .retinex import correct

log = logging.getLogger(__name__)

EVAL_CHUNK = 16


class TrainingError(ArithmeticError):
    """Non-finite loss or gradients during training."""


# -------------------------------------------------------------------- metrics


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """TP / (TP + FP + FN); two empty masks score 1.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for m in (pred, gt):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("masks must be binary")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = np.count_nonzero(p & g)
    union = np.count_nonzero(p | g)
    return 1.0 if union == 0 else tp / union


def sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (sigmoid(logits) > threshold).astype(np.uint8)


@dataclass
class EvalReport:
    records: List[tuple]  # (id, iou), sorted by id
    threshold: float = 0.5
    model_id: str = ""
    max_iou: Optional[float] = None

    def __post_init__(self):
        self.records = sorted((str(i), float(v)) for i, v in self.records)
        if self.max_iou is None:
            self.max_iou = self.miou

    @property
    def miou(self) -> float:
        return float(np.mean([v for _, v in self.records])) if self.records else 0.0

    def as_dict(self) -> Dict[str, float]:
        return dict(self.records)

    def to_text(self) -> str:
        lines = [
            f"# model={self.model_id}",
            f"# threshold={self.threshold!r}",
            f"# count={len(self.records)}",
            f"# mIoU={self.miou!r}",
            f"# maxIoU={self.max_iou!r}",
            "id,iou",
        ]
        lines += [f"{i},{v!r}" for i, v in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        header = {}
        records = []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            elif line == "id,iou":
                continue
            else:
                sid, _, value = line.rpartition(",")
                records.append((sid, float(value)))
        return cls(records, float(header.get("threshold", 0.5)), header.get("model", ""),
                   float(header["maxIoU"]) if "maxIoU" in header else None)


def exceed_rate(report: EvalReport, baseline: EvalReport) -> float:
    """Fraction of images whose IoU strictly beats the baseline's."""
    a, b = report.as_dict(), baseline.as_dict()
    if a.keys() != b.keys():
        raise ValueError("reports cover different image ids")
    if not a:
        raise ValueError("empty reports")
    return sum(a[k] > b[k] for k in a) / len(a)


# ------------------------------------------------------------------ inference


class _CorrectionCache:
    """Static illumination correction, computed once per sample id."""

    def __init__(self):
        self._store: Dict[tuple, np.ndarray] = {}

    def get(self, sample: Sample, params) -> np.ndarray:
        key = (sample.id, params)
        if key not in self._store:
            self._store[key] = correct(sample.image, params).astype(np.float32)
        return self._store[key]


_cache = _CorrectionCache()


def batch_inputs(model: Model, samples: Sequence[Sample]):
    x = np.stack([s.image for s in samples]).astype(np.float32)
    corrected = None
    if model.config.variant == "dvsfn":
        corrected = np.stack([_cache.get(s, model.config.illum) for s in samples])
    return x, corrected


def predict_logits(model: Model, samples: Sequence[Sample]) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(samples), EVAL_CHUNK):
            chunk = samples[i:i + EVAL_CHUNK]
            out.append(model.forward(*batch_inputs(model, chunk)).data[:, 0])
    return np.concatenate(out)


def predict_mask(model: Model, sample: Sample, threshold: float = 0.5) -> np.ndarray:
    return binarize(predict_logits(model, [sample])[0], threshold)


def evaluate(model: Model, samples: Sequence[Sample], threshold: float = 0.5, model_id: str = "",
             max_iou: Optional[float] = None) -> EvalReport:
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    size = model.config.input_size
    for s in samples:
        if s.image.shape[1:] != size:
            raise ValueError(f"sample {s.id} is {s.image.shape[1:]}, model expects {size}")
    ordered = sorted(samples, key=lambda s: s.id)
    logits = predict_logits(model, ordered)
    records = [(s.id, iou(binarize(z, threshold), s.mask)) for s, z in zip(ordered, logits)]
    return EvalReport(records, threshold, model_id, max_iou)


# ------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 10
    lr: float = 1e-4
    rms_decay: float = DEFAULT_DECAY
    rms_eps: float = DEFAULT_EPS
    seed: int = 0
    eval_every: int = 1
    max_steps: Optional[int] = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.lr < 0 or not 0 <= self.rms_decay < 1 or self.rms_eps <= 0:
            raise ValueError("invalid optimizer settings")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    mean_loss: float
    val_miou: Optional[float]
    kernel_sums: List[float] = field(default_factory=list)


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: List[EpochRecord]
    parameter_count: int

    @property
    def max_val_miou(self) -> Optional[float]:
        vals = [r.val_miou for r in self.history if r.val_miou is not None]
        return max(vals) if vals else None


def format_log(result: TrainResult, variant: str) -> str:
    lines = [f"# variant={variant}", f"# parameters={result.parameter_count}",
             "epoch,step,mean_loss,val_miou,kernel_sums"]
    for r in result.history:
        val = "" if r.val_miou is None else repr(r.val_miou)
        lines.append(f"{r.epoch},{r.step},{r.mean_loss!r},{val},{';'.join(repr(k) for k in r.kernel_sums)}")
    return "\n".join(lines) + "\n"


def train_step(model: Model, batch: Sequence[Sample], cfg: TrainConfig) -> float:
    x, corrected = batch_inputs(model, batch)
    target = np.stack([s.mask for s in batch])[:, None].astype(np.float32)
    loss = T.bce_with_logits(model.forward(x, corrected), target)
    T.backward(loss)
    rmsprop_step(model.parameters(), cfg.lr, cfg.rms_decay, cfg.rms_eps)
    return loss.item()


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """RMSprop on mean binary cross-entropy; drops the last partial batch."""
    if not train_set:
        raise ValueError("empty training set")
    if cfg.batch_size > len(train_set):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size {len(train_set)}")
    size = model.config.input_size
    for s in list(train_set) + list(val_set):
        if s.image.shape[1:] != size:
            raise ValueError(f"sample {s.id} is {s.image.shape[1:]}, model expects {size}")

    rng = np.random.default_rng(cfg.seed)
    n_batches = len(train_set) // cfg.batch_size
    step = 0
    history: List[EpochRecord] = []
    best_state, best_miou = None, -math.inf
    params = model.parameters()
    for p in params:
        p.grad = np.zeros_like(p.data)

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_set))
        losses = []
        for b in range(n_batches):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = [train_set[i] for i in perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            try:
                loss = train_step(model, batch, cfg)
            except T.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, step {step + 1}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"epoch {epoch}, step {step + 1}: non-finite loss {loss}")
            losses.append(loss)
            step += 1
        done = cfg.max_steps is not None and step >= cfg.max_steps
        val = None
        if val_set and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs or done):
            val = evaluate(model, val_set, cfg.threshold).miou
            if val > best_miou:
                best_miou, best_state = val, (model.state(), step)
        sums = model.illum.kernel_sums() if model.illum is not None else []
        record = EpochRecord(epoch, step, float(np.mean(losses)) if losses else float("nan"), val, sums)
        history.append(record)
        log.info("epoch %d step %d loss %.5f val_mIoU %s", epoch, step, record.mean_loss, val)
        if on_epoch is not None:
            on_epoch(record)
        if done:
            break

    result_max = max((r.val_miou for r in history if r.val_miou is not None), default=None)
    final = Checkpoint.from_model(model, step, result_max)
    if best_state is None:
        best = final
    else:
        state, best_step = best_state
        best = Checkpoint(model.config, state, best_step, model.seed, result_max)
    return TrainResult(final, best, history, model.parameter_count())
