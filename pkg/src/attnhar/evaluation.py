"""Sample-wise prediction, macro F1, Wilson intervals and attention summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .data import TimeSeriesDataset, extract_frames, frame_starts
from .errors import DataError, UnsupportedVariantError

REPORT_FORMAT = "attnhar.eval_report"
REPORT_VERSION = 1
Z_95 = 1.959964


@dataclass
class EvalReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    classes_in_mean: list[int]
    mean_f1: float
    accuracy: float
    wilson_low: float
    wilson_high: float
    n_samples: int
    n_correct: int

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "wilson_95": [self.wilson_low, self.wilson_high],
            "mean_f1": self.mean_f1,
            "classes_in_mean": self.classes_in_mean,
            "per_class": [
                {"class": k, "precision": float(self.precision[k]), "recall": float(self.recall[k]),
                 "f1": float(self.f1[k]), "support": int(self.support[k])}
                for k in range(len(self.f1))
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n < 1:
        raise DataError("wilson interval needs n >= 1")
    if not 0 <= successes <= n:
        raise DataError(f"successes {successes} outside [0, {n}]")
    z = Z_95 if confidence == 0.95 else NormalDist().inv_cdf(0.5 + confidence / 2.0)
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    low = 0.0 if successes == 0 else max(0.0, centre - half)
    high = 1.0 if successes == n else min(1.0, centre + half)
    return low, high


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_f1(y_true, y_pred, n_classes: int | None = None, include_null: bool = True) -> EvalReport:
    """Per-class P/R/F1 and their unweighted mean over classes present in the truth.

    Rows of the confusion matrix are true classes.  A class with no true
    and no predicted samples is left out of the mean; a class present in the
    truth but never predicted counts with F1 = 0.  ``include_null=False``
    drops class 0 from the mean (it stays in the matrix).
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_true.size} true labels vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise DataError("nothing to evaluate")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    if min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes:
        raise DataError(f"labels outside [0, {n_classes})")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    in_mean = [k for k in range(n_classes) if support[k] > 0 and (include_null or k != 0)]
    mean = float(np.mean(f1[in_mean])) if in_mean else 0.0
    n = int(y_true.size)
    correct = int(tp.sum())
    low, high = wilson_interval(correct, n)
    return EvalReport(cm, precision, recall, f1, support, in_mean, mean, correct / n, low, high, n, correct)


def frame_probabilities(model, frames: np.ndarray, batch_size: int = 500):
    """Eval-mode class probabilities and attention weights (or None) per frame."""
    probs, weights = [], []
    for s in range(0, len(frames), batch_size):
        pred = model.predict(frames[s:s + batch_size])
        probs.append(pred.probs)
        if pred.attention is not None:
            weights.append(pred.attention)
    return np.concatenate(probs), (np.concatenate(weights) if weights else None)


def merge_frame_probs(probs: np.ndarray, starts: np.ndarray, window: int, n: int) -> np.ndarray:
    """Average the probability vectors of every frame covering each sample.

    Samples after the last frame inherit that frame's probabilities.
    """
    acc = np.zeros((n, probs.shape[1]))
    count = np.zeros(n)
    for p, s in zip(probs, starts):
        acc[s:s + window] += p
        count[s:s + window] += 1
    last_end = starts[-1] + window
    acc[last_end:] = probs[-1]
    count[last_end:] = 1
    return acc / count[:, None]


def samplewise_predict(model, ds: TimeSeriesDataset, overlap: float = 0.5,
                       batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample predicted classes and the merged probabilities behind them."""
    window = model.cfg.window
    starts = frame_starts(len(ds), window, overlap)
    frames = ds.samples[starts[:, None] + np.arange(window)]
    probs, _ = frame_probabilities(model, frames, batch_size)
    merged = merge_frame_probs(probs, starts, window, len(ds))
    return np.argmax(merged, axis=1), merged


def evaluate(model, ds: TimeSeriesDataset, include_null: bool = True) -> EvalReport:
    pred, _ = samplewise_predict(model, ds)
    return macro_f1(ds.labels, pred, model.cfg.n_classes, include_null)


@dataclass
class AttentionSummary:
    classes: list[int]
    medians: np.ndarray       # (n_classes_seen, T-1)
    counts: list[int]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *(f"w{i + 1}" for i in range(self.medians.shape[1]))])
        for k, row in zip(self.classes, self.medians):
            w.writerow([k, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def summarize_weights(weights: np.ndarray, labels: np.ndarray) -> AttentionSummary:
    """Per-class elementwise median of attention weight vectors."""
    classes = sorted(int(k) for k in np.unique(labels))
    medians = np.array([np.median(weights[labels == k], axis=0) for k in classes])
    counts = [int(np.sum(labels == k)) for k in classes]
    return AttentionSummary(classes, medians, counts)


def attention_summary(model, ds: TimeSeriesDataset, overlap: float = 0.5):
    """Attribute each frame's weights to the frame's true class and take medians.

    Returns ``(summary, per-frame weights, frame labels)``.
    """
    if getattr(model, "attention", None) is None:
        raise UnsupportedVariantError("attention summary needs an attention-variant model")
    fb = extract_frames(ds, model.cfg.window, overlap)
    _, weights = frame_probabilities(model, fb.frames)
    return summarize_weights(weights, fb.labels), weights, fb.labels
