"""Regression and derived classification metrics for sentiment scores in [-3, 3]."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricsReport:
    mae: float
    corr: float
    acc2: float
    acc7: float
    f1: float
    trainable_params: int
    n_samples: int
    corr_degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _pair(pred, labels, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {p.size}")
    return p, y


def mae(pred, labels) -> float:
    p, y = _pair(pred, labels)
    return float(np.abs(p - y).mean())


def pearson_corr(pred, labels) -> tuple[float, bool]:
    """Sample Pearson r and a degenerate flag; constant input gives (0.0, True)."""
    p, y = _pair(pred, labels, min_len=2)
    pc, yc = p - p.mean(), y - y.mean()
    vp, vy = (pc * pc).mean(), (yc * yc).mean()
    if vp < 1e-12 or vy < 1e-12:
        return 0.0, True
    r = (pc * yc).mean() / np.sqrt(vp * vy)
    return float(np.clip(r, -1.0, 1.0)), False


def binary_metrics(pred, labels) -> tuple[float, float]:
    """Acc-2 and positive-class F1 with non-negative scores counted as positive."""
    p, y = _pair(pred, labels)
    pp, yp = p >= 0, y >= 0
    acc = float((pp == yp).mean())
    tp = int((pp & yp).sum())
    n_pred, n_true = int(pp.sum()), int(yp.sum())
    if n_pred == 0 and n_true == 0:
        return acc, 1.0
    if n_pred == 0 or n_true == 0:
        return acc, 0.0
    precision, recall = tp / n_pred, tp / n_true
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return acc, float(f1)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def acc7(pred, labels) -> float:
    p, y = _pair(pred, labels)
    pc = round_half_away(np.clip(p, -3.0, 3.0))
    yc = round_half_away(np.clip(y, -3.0, 3.0))
    return float((pc == yc).mean())


def report(pred, labels, trainable_params: int = 0) -> MetricsReport:
    p, y = _pair(pred, labels)
    r, degenerate = pearson_corr(p, y) if p.size >= 2 else (0.0, True)
    a2, f1 = binary_metrics(p, y)
    return MetricsReport(mae=mae(p, y), corr=r, acc2=a2, acc7=acc7(p, y), f1=f1,
                         trainable_params=int(trainable_params), n_samples=int(p.size),
                         corr_degenerate=degenerate)


def predict(model, samples, batch_size: int = 128) -> np.ndarray:
    """Deterministic eval-mode scores for ``samples``."""
    from .data import iter_batches
    from .tensor import evaluating, no_grad

    out = []
    with evaluating(), no_grad():
        for batch in iter_batches(samples, batch_size):
            scores, _ = model(batch)
            out.append(scores.data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, samples, batch_size: int = 128) -> MetricsReport:
    pred = predict(model, samples, batch_size)
    labels = np.array([s.label for s in samples])
    return report(pred, labels, model.num_trainable())
