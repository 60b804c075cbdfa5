"""Zero-shot evaluation on held-out synthetic scenes.

Prediction is always "highest-scoring class prompt", with no trained head:
per clip for action recognition, per frame for localization (a frame is
background when no prompt clears the sigmoid threshold of one half) and per
pixel for segmentation (same threshold rule, on upsampled patch logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataConfig, N_CLASSES, class_prompts, generate
from .losses import BACKGROUND, _pair_scores, upsample_logits
from .model import StreamModel
from .text import Task

EVAL_TASKS = (Task.AR, Task.TAL, Task.VOS)


@dataclass(frozen=True)
class EvalResult:
    task: str
    n: int
    accuracy: float
    mean_iou: float | None = None

    def summary(self) -> str:
        text = f"{self.task}: accuracy={self.accuracy:.4f} over n={self.n}"
        if self.mean_iou is not None:
            text += f" mean_iou={self.mean_iou:.4f}"
        return text


def _logits(model: StreamModel, scores: np.ndarray) -> np.ndarray:
    tau = float(np.exp(model.head.log_tau.data))
    return tau * scores + float(model.head.bias.data)


def predict_ar(model: StreamModel, frames: np.ndarray) -> np.ndarray:
    bb = model.backbone
    v = bb.global_feature(bb.temporal_features(bb.forward(frames)))
    texts = model.text.encode(class_prompts(Task.AR))
    return np.argmax(v.data @ texts.data.T, axis=-1)


def predict_tal(model: StreamModel, frames: np.ndarray) -> np.ndarray:
    bb = model.backbone
    f = bb.temporal_features(bb.forward(frames))
    texts = model.text.encode(class_prompts(Task.TAL))
    logits = _logits(model, f.data @ texts.data.T)
    pred = np.argmax(logits, axis=-1)
    return np.where(logits.max(axis=-1) > 0, pred, BACKGROUND)


def predict_vos(model: StreamModel, frames: np.ndarray) -> np.ndarray:
    bb = model.backbone
    F = bb.spatial_features(bb.forward(frames))
    texts = model.text.encode(class_prompts(Task.VOS))
    logits = upsample_logits(_pair_scores(F, texts), frames.shape[2:4]).data
    logits = _logits(model, logits)
    pred = np.argmax(logits, axis=-1)
    return np.where(logits.max(axis=-1) > 0, pred, BACKGROUND)


def mean_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> float:
    """Mean over labels present in either map, background included."""
    ious = []
    for c in range(BACKGROUND, n_classes):
        p, t = pred == c, truth == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def evaluate(
    model: StreamModel,
    task: Task | str,
    n: int = 128,
    seed: int = 999,
    data_config: DataConfig | None = None,
    batch_size: int = 32,
) -> EvalResult:
    task = Task(task)
    if task not in EVAL_TASKS:
        raise ValueError(f"evaluation supports {[t.value for t in EVAL_TASKS]}, not {task.value}")
    if n < 1:
        raise ValueError("n must be positive")
    cfg = data_config or DataConfig(image_size=model.config.image_size)
    correct = total = 0
    preds, truths = [], []
    for start in range(0, n, batch_size):
        batch = generate(seed, cfg, task, indices=np.arange(start, min(n, start + batch_size)))
        if task == Task.AR:
            pred, truth = predict_ar(model, batch.frames), batch.class_ids
        elif task == Task.TAL:
            pred, truth = predict_tal(model, batch.frames), batch.frame_labels
        else:
            pred, truth = predict_vos(model, batch.frames), batch.masks
            preds.append(pred)
            truths.append(truth)
        correct += int((pred == truth).sum())
        total += truth.size
    iou = mean_iou(np.concatenate(preds), np.concatenate(truths)) if task == Task.VOS else None
    return EvalResult(task.value, n, correct / total, iou)
