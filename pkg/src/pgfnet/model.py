"""Progressive gated-fusion encoder with a frozen backbone, LoRA and post-fusion adapters.

Layer wiring for a fusion layer (index >= fusion_start)::

    h      = LN1(x + SelfAttn(x))                  # query/value through LoRA
    delta  = CrossAttn(q=h, kv=bank)               # or pooled bank (w/o CA)
    cross  = h + delta
    g      = sigmoid([h; cross] @ W_g + b_g)
    fused  = g * h + (1 - g) * cross                # or h + delta (w/o gate)
    z      = fused + FFN(fused)
    out    = LN_adapter(z + up(relu(down(z))))     # or LN2(z) (w/o refiner)

With the cross-attention output projection, adapter up-projection and LoRA B
factors zeroed, ``out`` equals the plain text-only layer ``LN2(h + FFN(h))``
because the adapter norm starts at the same gain/bias as the frozen LN2.

All dense weights are stored input-major (``x @ W``).
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import Tensor


class InputError(ValueError):
    """A batch that violates the model's input contract."""


@dataclass
class AblationFlags:
    use_cross_attention: bool = True
    use_gate: bool = True
    use_refiner: bool = True

    @property
    def label(self) -> str:
        off = [name for name, on in (("CA", self.use_cross_attention), ("Gate", self.use_gate),
                                     ("Refiner", self.use_refiner)) if not on]
        return "full" if not off else "w/o " + " & ".join(off)


@dataclass
class ModelConfig:
    """Architecture and PEFT hyperparameters.

    Defaults are the desk-scale toy used across tests and the CLI;
    :meth:`full_scale` gives the full-size configuration for parameter accounting.
    """

    hidden_dim: int = 16
    num_layers: int = 2
    fusion_start: int = 0
    num_heads: int = 2
    ffn_dim: int = 32
    vocab_size: int = 50
    max_text_len: int = 16
    max_audio_len: int = 8
    max_visual_len: int = 8
    audio_dim: int = 5
    visual_dim: int = 4
    lora_rank: int = 2
    adapter_bottleneck: int = 4
    head_hidden: int = 16
    dropout_p: float = 0.1
    ablation: AblationFlags = field(default_factory=AblationFlags)
    unfreeze_top_k: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_heads", "ffn_dim", "vocab_size", "max_text_len",
                     "max_audio_len", "max_visual_len", "audio_dim", "visual_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError("must be a positive integer", name)
        for name in ("lora_rank", "adapter_bottleneck", "unfreeze_top_k"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", name)
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}",
                              "num_heads")
        if not 0 <= self.fusion_start <= self.num_layers:
            raise ConfigError(f"must lie in [0, {self.num_layers}]", "fusion_start")
        if self.lora_rank > self.hidden_dim:
            raise ConfigError(f"rank {self.lora_rank} exceeds hidden_dim {self.hidden_dim}", "lora_rank")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("must lie in [0, 1)", "dropout_p")
        if self.ln_eps <= 0:
            raise ConfigError("must be positive", "ln_eps")
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(hidden_dim=768, num_layers=12, fusion_start=0, num_heads=12, ffn_dim=3072,
                    vocab_size=30522, max_text_len=50, max_audio_len=50, max_visual_len=50,
                    audio_dim=5, visual_dim=4, lora_rank=32, adapter_bottleneck=64, head_hidden=128)
        base.update(overrides)
        return cls(**base)

    @property
    def fusion_layers(self) -> range:
        return range(self.fusion_start, self.num_layers)

    @property
    def has_refiner(self) -> bool:
        return self.ablation.use_refiner and self.adapter_bottleneck > 0

    @property
    def unfrozen_layers(self) -> range:
        k = 0 if self.ablation.use_refiner else min(self.unfreeze_top_k, self.num_layers)
        return range(self.num_layers - k, self.num_layers)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class MultimodalBatch:
    token_ids: np.ndarray     # int [B, T_t]
    text_mask: np.ndarray     # bool [B, T_t]
    audio: np.ndarray         # [B, T_a, d_a]
    audio_mask: np.ndarray    # bool [B, T_a]
    visual: np.ndarray        # [B, T_v, d_v]
    visual_mask: np.ndarray   # bool [B, T_v]
    labels: np.ndarray        # [B]

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def validate(self, config: ModelConfig | None = None) -> None:
        for name in ("text_mask", "audio_mask", "visual_mask"):
            m = getattr(self, name)
            if not m.any(axis=1).all():
                raise InputError(f"{name} has a row with no valid entry")
        if np.any(np.abs(self.labels) > 3.0):
            raise InputError("labels must lie in [-3, 3]")
        if config is None:
            return
        if self.token_ids.shape[1] > config.max_text_len:
            raise InputError(f"text length {self.token_ids.shape[1]} exceeds max_text_len {config.max_text_len}")
        if self.audio.shape[1] > config.max_audio_len or self.visual.shape[1] > config.max_visual_len:
            raise InputError("audio/visual sequence longer than the configured maximum")
        if self.audio.shape[2] != config.audio_dim or self.visual.shape[2] != config.visual_dim:
            raise ConfigError(f"feature dims ({self.audio.shape[2]}, {self.visual.shape[2]}) do not match "
                              f"config ({config.audio_dim}, {config.visual_dim})")


@dataclass
class LayerGateStats:
    layer: int
    mean: float
    std: float
    frac_open: float   # fraction of entries with g > 0.5


@dataclass
class GateTrace:
    layers: list[LayerGateStats] = field(default_factory=list)

    def means(self) -> dict[int, float]:
        return {s.layer: s.mean for s in self.layers}


# ------------------------------------------------------------------ params

def param_group(name: str) -> str:
    """Accounting bucket for a parameter path."""
    if name.startswith("embed."):
        return "embedding"
    if name.startswith("bank."):
        return "projections"
    if name.startswith("head."):
        return "head"
    part = name.split(".")[2]
    return {"lora": "lora", "cross": "cross_attention", "gate": "gate", "adapter": "adapters"}.get(part, "backbone")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path the configuration instantiates, in a stable order."""
    D, F, r, m = config.hidden_dim, config.ffn_dim, config.lora_rank, config.adapter_bottleneck
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, D),
        "embed.position": (config.max_text_len, D),
        "embed.ln.gain": (D,),
        "embed.ln.bias": (D,),
    }
    fusion = set(config.fusion_layers)
    if fusion:
        for mod, d_in, t_max in (("audio", config.audio_dim, config.max_audio_len),
                                 ("visual", config.visual_dim, config.max_visual_len)):
            shapes[f"bank.{mod}.w"] = (d_in, D)
            shapes[f"bank.{mod}.b"] = (D,)
            shapes[f"bank.{mod}.pos"] = (t_max, D)
    for l in range(config.num_layers):
        p = f"layers.{l}."
        for k in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + k] = (D, D)
        # no key bias: it shifts all scores of a query equally and cancels in the softmax
        for k in ("bq", "bv", "bo"):
            shapes[p + "attn." + k] = (D,)
        shapes.update({p + "ln1.gain": (D,), p + "ln1.bias": (D,), p + "ffn.w1": (D, F), p + "ffn.b1": (F,),
                       p + "ffn.w2": (F, D), p + "ffn.b2": (D,), p + "ln2.gain": (D,), p + "ln2.bias": (D,)})
        if r > 0:
            shapes.update({p + "lora.a_q": (r, D), p + "lora.b_q": (D, r),
                           p + "lora.a_v": (r, D), p + "lora.b_v": (D, r)})
        if l not in fusion:
            continue
        if config.ablation.use_cross_attention:
            for k in ("wq", "wk", "wv", "wo"):
                shapes[p + "cross." + k] = (D, D)
            for k in ("bq", "bv", "bo"):
                shapes[p + "cross." + k] = (D,)
        if config.ablation.use_gate:
            shapes[p + "gate.w"] = (2 * D, D)
            shapes[p + "gate.b"] = (D,)
        if config.has_refiner:
            shapes.update({p + "adapter.down_w": (D, m), p + "adapter.down_b": (m,),
                           p + "adapter.up_w": (m, D), p + "adapter.up_b": (D,),
                           p + "adapter.ln_gain": (D,), p + "adapter.ln_bias": (D,)})
    H = config.head_hidden
    shapes.update({"head.w1": (D, H), "head.b1": (H,), "head.w2": (H, 1), "head.b2": (1,)})
    return shapes


def is_trainable(name: str, config: ModelConfig) -> bool:
    group = param_group(name)
    if group == "embedding":
        return False
    if group == "backbone":
        return int(name.split(".")[1]) in config.unfrozen_layers
    return True


def _xavier(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_value(name: str, shape, seed: int) -> np.ndarray:
    # seeding by path keeps shared weights identical across configs and ablations
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    leaf = name.rsplit(".", 1)[-1]
    if name == "embed.token" or name == "embed.position":
        return rng.normal(0.0, 1.0, size=shape)
    if leaf in ("gain", "ln_gain"):
        return np.ones(shape)
    if leaf in ("a_q", "a_v"):
        return rng.normal(0.0, 0.02, size=shape)
    if leaf in ("b_q", "b_v", "up_w", "pos") or name.endswith("gate.w"):
        return np.zeros(shape)
    if len(shape) == 2:
        return _xavier(rng, shape)
    return np.zeros(shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    return {name: Tensor(_init_value(name, shape, seed), requires_grad=is_trainable(name, config), name=name)
            for name, shape in param_shapes(config).items()}


def _scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# -------------------------------------------------------------- components


def lora_linear(x: Tensor, W: Tensor, A: Tensor, B: Tensor, scale: float) -> Tensor:
    """Frozen ``x @ W`` plus the low-rank update ``scale * x @ A^T @ B^T``."""
    r, d = A.shape
    if r > d:
        raise ConfigError(f"LoRA rank {r} exceeds dimension {d}", "lora_rank")
    low = T.matmul(T.matmul(x, T.transpose(A, (1, 0))), T.transpose(B, (1, 0)))
    return T.matmul(x, W) + T.scale(low, scale)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _attend(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, heads: int,
            dropout_p: float, rng) -> Tensor:
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    dk = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    probs = T.dropout(T.softmax_lastdim(scores, mask), dropout_p, rng)
    return _merge_heads(T.matmul(probs, vh))


def self_attention(h_prev: Tensor, text_mask: np.ndarray, p: Mapping[str, Tensor], config: ModelConfig,
                   rng=None) -> Tensor:
    """Post-norm multi-head self-attention sublayer; query/value projections carry LoRA."""
    if config.lora_rank > 0:
        s = 1.0 / config.lora_rank
        q = lora_linear(h_prev, p["attn.wq"], p["lora.a_q"], p["lora.b_q"], s) + p["attn.bq"]
        v = lora_linear(h_prev, p["attn.wv"], p["lora.a_v"], p["lora.b_v"], s) + p["attn.bv"]
    else:
        q = T.matmul(h_prev, p["attn.wq"]) + p["attn.bq"]
        v = T.matmul(h_prev, p["attn.wv"]) + p["attn.bv"]
    k = T.matmul(h_prev, p["attn.wk"])
    ctx = _attend(q, k, v, text_mask, config.num_heads, config.dropout_p, rng)
    out = T.matmul(ctx, p["attn.wo"]) + p["attn.bo"]
    return T.layer_norm(h_prev + out, p["ln1.gain"], p["ln1.bias"], config.ln_eps)


def build_feature_bank(audio, visual, audio_mask, visual_mask, p: Mapping[str, Tensor],
                       config: ModelConfig | None = None) -> tuple[Tensor, np.ndarray]:
    """Project both non-verbal streams to the hidden size and stack them along time."""
    audio, visual = T.tensor(audio), T.tensor(visual)
    if audio.shape[-1] != p["bank.audio.w"].shape[0] or visual.shape[-1] != p["bank.visual.w"].shape[0]:
        raise ConfigError(f"feature dims {audio.shape[-1]}/{visual.shape[-1]} do not match projections "
                          f"{p['bank.audio.w'].shape}/{p['bank.visual.w'].shape}")
    parts = []
    for x, mod in ((audio, "audio"), (visual, "visual")):
        proj = T.matmul(x, p[f"bank.{mod}.w"]) + p[f"bank.{mod}.b"]
        pos = p[f"bank.{mod}.pos"]
        t = x.shape[-2]
        if t > pos.shape[0]:
            raise InputError(f"{mod} length {t} exceeds configured maximum {pos.shape[0]}")
        pos_t = T.broadcast_to(T.reshape(pos[:t], (1, t, pos.shape[1])), proj.shape)
        parts.append(proj + pos_t)
    bank = T.concat_seq(parts[0], parts[1])
    mask = np.concatenate([np.asarray(audio_mask, bool), np.asarray(visual_mask, bool)], axis=-1)
    return bank, mask


def cross_attention(h_text: Tensor, bank: Tensor, bank_mask: np.ndarray, p: Mapping[str, Tensor],
                    config: ModelConfig, rng=None) -> Tensor:
    """Text queries against bank keys/values; returns the projected attention read-out.

    The fusion layer adds this to ``h_text`` to form the cross-modal stream.
    """
    bank_mask = np.asarray(bank_mask, dtype=bool)
    if not bank_mask.any(axis=-1).all():
        raise InputError("feature bank fully masked for at least one sample")
    q = T.matmul(h_text, p["cross.wq"]) + p["cross.bq"]
    k = T.matmul(bank, p["cross.wk"])
    v = T.matmul(bank, p["cross.wv"]) + p["cross.bv"]
    ctx = _attend(q, k, v, bank_mask, config.num_heads, config.dropout_p, rng)
    return T.matmul(ctx, p["cross.wo"]) + p["cross.bo"]


def pooled_bank(h_text: Tensor, bank: Tensor, bank_mask: np.ndarray) -> Tensor:
    """Masked mean of the bank per sample, broadcast over text positions (the w/o-CA substitute)."""
    m = np.asarray(bank_mask, dtype=np.float64)
    weights = m / m.sum(axis=-1, keepdims=True)
    w = np.broadcast_to(weights[:, :, None], bank.shape)
    pooled = T.sum(T.mul(bank, w), axis=1, keepdims=True)
    return T.broadcast_to(pooled, h_text.shape)


def gated_fusion(h_text: Tensor, h_cross: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    if h_text.shape != h_cross.shape:
        raise T.DimensionError(f"gated_fusion: {h_text.shape} vs {h_cross.shape}")
    g = T.sigmoid(T.matmul(T.concat([h_text, h_cross], axis=-1), p["gate.w"]) + p["gate.b"])
    fused = T.convex_mix(g, h_text, h_cross)
    return fused, g


def adapter(x: Tensor, p: Mapping[str, Tensor], eps: float = 1e-5) -> Tensor:
    down = T.relu(T.matmul(x, p["adapter.down_w"]) + p["adapter.down_b"])
    up = T.matmul(down, p["adapter.up_w"]) + p["adapter.up_b"]
    return T.layer_norm(x + up, p["adapter.ln_gain"], p["adapter.ln_bias"], eps)


def _ffn(x: Tensor, p, config: ModelConfig, rng) -> Tensor:
    hidden = T.dropout(T.relu(T.matmul(x, p["ffn.w1"]) + p["ffn.b1"]), config.dropout_p, rng)
    return T.matmul(hidden, p["ffn.w2"]) + p["ffn.b2"]


def plain_layer_forward(h_prev: Tensor, text_mask, p, config: ModelConfig, rng=None) -> Tensor:
    h = self_attention(h_prev, text_mask, p, config, rng)
    return T.layer_norm(h + _ffn(h, p, config, rng), p["ln2.gain"], p["ln2.bias"], config.ln_eps)


def fusion_layer_forward(h_prev: Tensor, text_mask, bank: Tensor, bank_mask, p, config: ModelConfig,
                         rng=None) -> tuple[Tensor, Tensor | None]:
    """One fusion layer. Returns the layer output and the gate tensor (None without a gate)."""
    flags = config.ablation
    h_text = self_attention(h_prev, text_mask, p, config, rng)
    if flags.use_cross_attention:
        delta = cross_attention(h_text, bank, bank_mask, p, config, rng)
    else:
        delta = pooled_bank(h_text, bank, bank_mask)
    if flags.use_gate:
        fused, g = gated_fusion(h_text, h_text + delta, p)
    else:
        fused, g = h_text + delta, None
    z = fused + _ffn(fused, p, config, rng)
    if config.has_refiner:
        out = adapter(z, p, config.ln_eps)
    else:
        out = T.layer_norm(z, p["ln2.gain"], p["ln2.bias"], config.ln_eps)
    return out, g


def _gate_stats(layer: int, g: np.ndarray, text_mask: np.ndarray) -> LayerGateStats:
    vals = g[np.asarray(text_mask, bool)]
    return LayerGateStats(layer, float(vals.mean()), float(vals.std()), float((vals > 0.5).mean()))


def embed_text(token_ids, params, config: ModelConfig) -> Tensor:
    ids = np.asarray(token_ids)
    b, t = ids.shape
    if t > config.max_text_len:
        raise InputError(f"text length {t} exceeds max_text_len {config.max_text_len}")
    tok = T.embedding(params["embed.token"], ids)
    pos = T.broadcast_to(T.reshape(params["embed.position"][:t], (1, t, config.hidden_dim)), tok.shape)
    return T.layer_norm(tok + pos, params["embed.ln.gain"], params["embed.ln.bias"], config.ln_eps)


def encoder_forward(batch: MultimodalBatch, params: Mapping[str, Tensor], config: ModelConfig,
                    rng=None) -> tuple[Tensor, GateTrace]:
    """Run the encoder; returns the position-0 ([CLS]) hidden state and gate statistics."""
    batch.validate(config)
    h = embed_text(batch.token_ids, params, config)
    trace = GateTrace()
    bank = bank_mask = None
    for l in range(config.num_layers):
        lp = _scope(params, f"layers.{l}.")
        if l < config.fusion_start:
            h = plain_layer_forward(h, batch.text_mask, lp, config, rng)
            continue
        if bank is None:
            bank, bank_mask = build_feature_bank(batch.audio, batch.visual, batch.audio_mask,
                                                 batch.visual_mask, params, config)
        h, g = fusion_layer_forward(h, batch.text_mask, bank, bank_mask, lp, config, rng)
        if g is not None:
            trace.layers.append(_gate_stats(l, g.data, batch.text_mask))
    return h[:, 0, :], trace


def head_forward(h_cls: Tensor, p: Mapping[str, Tensor], dropout_p: float = 0.0, rng=None) -> Tensor:
    hidden = T.dropout(T.relu(T.matmul(h_cls, p["head.w1"]) + p["head.b1"]), dropout_p, rng)
    out = T.matmul(hidden, p["head.w2"]) + p["head.b2"]
    return T.reshape(out, (out.shape[0],))


# ------------------------------------------------------------------ counts

COUNT_GROUPS = ("lora", "projections", "cross_attention", "gate", "adapters", "head", "unfrozen_backbone")


def count_trainable_params(config: ModelConfig) -> dict[str, int]:
    """Closed-form trainable-parameter breakdown for ``config``."""
    D, F, r, m, L = config.hidden_dim, config.ffn_dim, config.lora_rank, config.adapter_bottleneck, config.num_layers
    n_fusion = len(config.fusion_layers)
    flags = config.ablation
    out = dict.fromkeys(COUNT_GROUPS, 0)
    out["lora"] = L * 4 * r * D
    if n_fusion:
        out["projections"] = ((config.audio_dim + 1) * D + (config.visual_dim + 1) * D
                              + (config.max_audio_len + config.max_visual_len) * D)
    if flags.use_cross_attention:
        out["cross_attention"] = n_fusion * (4 * D * D + 3 * D)
    if flags.use_gate:
        out["gate"] = n_fusion * (2 * D * D + D)
    if config.has_refiner:
        out["adapters"] = n_fusion * (D * m + m + m * D + D + 2 * D)
    out["head"] = D * config.head_hidden + config.head_hidden + config.head_hidden + 1
    per_layer = (4 * D * D + 3 * D) + (D * F + F + F * D + D) + 4 * D
    out["unfrozen_backbone"] = len(config.unfrozen_layers) * per_layer
    out["total"] = sum(out[k] for k in COUNT_GROUPS)
    return out


# ------------------------------------------------------------------- model


class PGFNet:
    """Parameter container plus forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, batch: MultimodalBatch, rng=None) -> tuple[Tensor, GateTrace]:
        h_cls, trace = encoder_forward(batch, self.params, self.config, rng)
        return head_forward(h_cls, self.params, self.config.dropout_p, rng), trace

    __call__ = forward

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((k, v) for k, v in self.params.items() if v.requires_grad)

    def frozen(self) -> Iterator[tuple[str, Tensor]]:
        return ((k, v) for k, v in self.params.items() if not v.requires_grad)

    def num_trainable(self) -> int:
        return sum(v.size for _, v in self.trainable())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state does not match model parameters: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise T.DimensionError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
