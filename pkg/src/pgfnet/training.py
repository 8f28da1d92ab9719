"""L1 regression training: AdamW with decoupled decay, StepLR, early stopping on val MAE."""
from __future__ import annotations

import json
import logging
from decimal import Decimal
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ConfigError
from .data import Sample, iter_batches
from .metrics import MetricsReport, evaluate
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_size: int = 9
    gamma: float = 0.1
    batch_size: int = 128
    max_epochs: int = 20
    patience: int = 10
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ConfigError("must be non-negative", "lr")
        if not 0 < self.gamma <= 1:
            raise ConfigError("must lie in (0, 1]", "gamma")
        if self.patience < 1:
            raise ConfigError("must be at least 1", "patience")
        if self.step_size < 1:
            raise ConfigError("must be at least 1", "step_size")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("must be at least 1", "batch_size" if self.batch_size < 1 else "max_epochs")


def l1_loss(pred: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if pred.size == 0 or labels.size == 0:
        raise ValueError("l1_loss on an empty batch")
    if pred.shape != labels.shape:
        raise T.DimensionError(f"l1_loss: pred {pred.shape} vs labels {labels.shape}")
    return T.mean(T.absolute(pred - labels))


def steplr(epoch: int, config: TrainConfig) -> float:
    """base_lr * gamma ** (epoch // step_size).

    Evaluated in decimal on the configured literals so 1e-3 * 0.1**2 is exactly
    1e-5 rather than 1.0000000000000003e-05.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    k = epoch // config.step_size
    return float(Decimal(repr(config.lr)) * Decimal(repr(config.gamma)) ** k)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, config: TrainConfig, lr: float) -> None:
    """One in-place AdamW update over every requires_grad tensor in ``params``."""
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data *= 1 - lr * config.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.requires_grad and p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


@dataclass
class TrainState:
    epoch: int = 0
    best_val_mae: float = float("inf")
    best_epoch: int = -1
    since_best: int = 0
    best_state: dict[str, np.ndarray] | None = None


class EarlyStopping:
    """Tracks the best validation MAE; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.state = TrainState()

    def update(self, epoch: int, val_mae: float, snapshot: Callable[[], dict] | None = None) -> bool:
        s = self.state
        s.epoch = epoch
        if val_mae < s.best_val_mae:
            s.best_val_mae, s.best_epoch, s.since_best = val_mae, epoch, 0
            if snapshot is not None:
                s.best_state = snapshot()
        else:
            s.since_best += 1
        return s.since_best > self.patience


def train_epoch(model, samples: list[Sample], config: TrainConfig, opt: AdamWState, lr: float,
                rng: np.random.Generator) -> tuple[float, dict[int, dict[str, float]]]:
    """One pass over ``samples``; returns mean loss and per-layer gate stats averaged over batches."""
    T.set_training(True)
    total, count = 0.0, 0
    gate_acc: dict[int, np.ndarray] = {}
    n_batches = 0
    trainable = [p for _, p in model.trainable()]
    for batch in iter_batches(samples, config.batch_size, rng):
        model.zero_grad()
        pred, trace = model(batch, rng)
        loss = l1_loss(pred, batch.labels)
        T.backward(loss)
        clip_grad_norm(trainable, config.clip_norm)
        adamw_step(model.params, opt, config, lr)
        total += loss.item() * len(batch)
        count += len(batch)
        n_batches += 1
        for s in trace.layers:
            gate_acc[s.layer] = gate_acc.get(s.layer, 0.0) + np.array([s.mean, s.std, s.frac_open])
    model.zero_grad()
    gates = {layer: dict(zip(("mean", "std", "frac_open"), (acc / n_batches).tolist()))
             for layer, acc in sorted(gate_acc.items())}
    return total / count, gates


def fit(model, train: list[Sample], val: list[Sample], config: TrainConfig,
        validate: Callable[[object], MetricsReport] | None = None,
        log_path=None) -> tuple[object, list[dict]]:
    """Train ``model`` in place and restore the best-validation parameters.

    Returns the model and a per-epoch history of train loss, validation
    metrics, learning rate and gate statistics per fusion layer.
    """
    if not train or not val:
        raise ValueError("fit needs non-empty train and validation sets")
    if validate is None:
        def validate(m):
            return evaluate(m, val, config.batch_size)
    rng = np.random.default_rng(config.seed)
    opt = AdamWState()
    stopper = EarlyStopping(config.patience)
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            lr = steplr(epoch, config)
            try:
                train_loss, gates = train_epoch(model, train, config, opt, lr, rng)
            except FloatingPointError as err:
                raise TrainingDiverged(f"epoch {epoch}: {err}", history) from err
            report = validate(model)
            rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val": asdict(report),
                   "gate": {str(k): v for k, v in gates.items()}}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            log.info("epoch %d lr %.1e train %.4f val mae %.4f", epoch, lr, train_loss, report.mae)
            if not np.isfinite(report.mae) or report.mae > 1e6:
                raise TrainingDiverged(f"epoch {epoch}: validation MAE {report.mae}", history)
            if stopper.update(epoch, report.mae, model.state):
                break
    finally:
        if log_fh:
            log_fh.close()
    if stopper.state.best_state is not None:
        model.load_state(stopper.state.best_state)
    return model, history
