"""Finite-difference probe over every trainable parameter of a small fusion model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, collate
from .model import ModelConfig, PGFNet
from .training import l1_loss


def _toy_model() -> ModelConfig:
    return ModelConfig(hidden_dim=8, num_layers=2, fusion_start=0, num_heads=2, ffn_dim=16, vocab_size=20,
                       max_text_len=8, max_audio_len=4, max_visual_len=4, audio_dim=3, visual_dim=3,
                       lora_rank=2, adapter_bottleneck=4, head_hidden=4, dropout_p=0.0)


@dataclass
class GradcheckConfig:
    model: ModelConfig = field(default_factory=_toy_model)
    # odd so the L1 residual signs of a shared-derivative bias cannot cancel to an exact zero
    batch_size: int = 5
    eps: float = 1e-5
    perturb_std: float = 0.3
    seed: int = 0


def probe_batch(config: ModelConfig, batch_size: int, rng: np.random.Generator):
    """Random ragged batch: variable text, audio and visual lengths so every mask path runs."""
    samples = []
    for _ in range(batch_size):
        n_t = int(rng.integers(2, config.max_text_len + 1))
        n_a = int(rng.integers(1, config.max_audio_len + 1))
        n_v = int(rng.integers(1, config.max_visual_len + 1))
        samples.append(Sample(rng.integers(1, config.vocab_size, size=n_t),
                              rng.normal(size=(n_a, config.audio_dim)),
                              rng.normal(size=(n_v, config.visual_dim)),
                              float(rng.uniform(-3, 3))))
    return collate(samples)


def perturbed_model(config: ModelConfig, seed: int, std: float) -> PGFNet:
    """Model whose trainable tensors are jittered off their zero/identity init so every path carries gradient."""
    model = PGFNet(config, seed=seed)
    rng = np.random.default_rng([seed, 99])
    for _, p in model.trainable():
        p.data = p.data + rng.normal(0.0, std, size=p.shape)
    return model


def run_gradcheck(cfg: GradcheckConfig) -> dict:
    if cfg.model.dropout_p != 0.0:
        cfg.model = cfg.model.replace(dropout_p=0.0)
    rng = np.random.default_rng(cfg.seed)
    model = perturbed_model(cfg.model, cfg.seed, cfg.perturb_std)
    batch = probe_batch(cfg.model, cfg.batch_size, rng)

    def loss():
        pred, _ = model(batch)
        return l1_loss(pred, batch.labels)

    params = [p for _, p in model.trainable()]
    start = time.perf_counter()
    with T.evaluating():
        err = T.grad_check(loss, params, cfg.eps)
    return {"max_rel_error": float(err), "n_params": int(sum(p.size for p in params)),
            "eps": cfg.eps, "seconds": time.perf_counter() - start}
