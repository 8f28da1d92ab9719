"""Synthetic multimodal sentiment data with a planted audio/visual signal.

Each sample carries a [CLS]-prefixed token sequence, a ragged audio sequence
and a ragged visual sequence. The label is::

    clamp(w_t * mean(u[tokens]) + s_a * mean(audio[:, 0]) + s_v * mean(visual[:, 1]) + eps, -3, 3)

where ``u`` is a seeded per-token score table and the means run over the
content tokens and the valid frames of each sample.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError
from .model import MultimodalBatch

PAD_ID = 0
CLS_ID = 1
FORMAT = "pgfnet-jsonl"
VERSION = 1


class SchemaError(ValueError):
    """A dataset file that does not match the line-delimited schema."""


@dataclass
class SynthSpec:
    n_samples: int = 4000
    vocab_size: int = 50
    text_len: int = 12          # includes the leading [CLS]
    audio_len: int = 8
    audio_min_len: int = 2
    audio_dim: int = 5
    visual_len: int = 8
    visual_min_len: int = 2
    visual_dim: int = 4
    text_weight: float = 1.5
    audio_weight: float = 1.2
    visual_weight: float = 1.2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ConfigError("must be non-negative", "n_samples")
        if self.vocab_size < 3:
            raise ConfigError("needs room for [PAD], [CLS] and one content token", "vocab_size")
        if self.text_len < 2:
            raise ConfigError("needs [CLS] plus at least one token", "text_len")
        if not 1 <= self.audio_min_len <= self.audio_len:
            raise ConfigError("must lie in [1, audio_len]", "audio_min_len")
        if not 1 <= self.visual_min_len <= self.visual_len:
            raise ConfigError("must lie in [1, visual_len]", "visual_min_len")
        if self.audio_dim < 1 or self.visual_dim < 2:
            raise ConfigError("audio needs channel 0, visual needs channel 1", "visual_dim")
        if self.noise_std < 0:
            raise ConfigError("must be non-negative", "noise_std")


@dataclass
class Sample:
    tokens: np.ndarray   # int [n_t], position 0 is [CLS]
    audio: np.ndarray    # [n_a, d_a]
    visual: np.ndarray   # [n_v, d_v]
    label: float

    def __eq__(self, other):
        return (isinstance(other, Sample) and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.audio, other.audio) and np.array_equal(self.visual, other.visual)
                and self.label == other.label)


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    audio_dim: int = 5
    visual_dim: int = 4

    def parts(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))

    def all(self) -> list[Sample]:
        return self.train + self.val + self.test


def token_scores(spec: SynthSpec) -> np.ndarray:
    """Fixed per-token sentiment scores; [PAD] and [CLS] score 0."""
    rng = np.random.default_rng([spec.seed, 7])
    u = rng.normal(0.0, 1.0, size=spec.vocab_size)
    u[[PAD_ID, CLS_ID]] = 0.0
    return u


def split_sizes(n: int, ratios=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


def generate(spec: SynthSpec) -> DatasetSplit:
    rng = np.random.default_rng(spec.seed)
    u = token_scores(spec)
    samples = []
    for _ in range(spec.n_samples):
        body = rng.integers(CLS_ID + 1, spec.vocab_size, size=spec.text_len - 1)
        n_a = int(rng.integers(spec.audio_min_len, spec.audio_len + 1))
        n_v = int(rng.integers(spec.visual_min_len, spec.visual_len + 1))
        audio = rng.normal(size=(n_a, spec.audio_dim))
        visual = rng.normal(size=(n_v, spec.visual_dim))
        raw = (spec.text_weight * u[body].mean() + spec.audio_weight * audio[:, 0].mean()
               + spec.visual_weight * visual[:, 1].mean() + spec.noise_std * rng.normal())
        tokens = np.concatenate([[CLS_ID], body]).astype(np.int64)
        samples.append(Sample(tokens, audio, visual, float(np.clip(raw, -3.0, 3.0))))
    order = rng.permutation(len(samples))
    n_train, n_val, _ = split_sizes(len(samples))
    shuffled = [samples[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:],
                        spec.audio_dim, spec.visual_dim)


def text_only_floor(spec: SynthSpec, draws: int = 1_000_000, seed: int = 12345) -> tuple[float, float]:
    """Monte-Carlo estimate of E|s_a*mean_a + s_v*mean_v + eps| and its standard error.

    The mean of n i.i.d. standard normals is N(0, 1/n), so frame means are drawn
    directly with the frame count sampled like the generator does.
    """
    if draws < 2:
        raise ValueError("need at least two draws")
    rng = np.random.default_rng(seed)
    n_a = rng.integers(spec.audio_min_len, spec.audio_len + 1, size=draws)
    n_v = rng.integers(spec.visual_min_len, spec.visual_len + 1, size=draws)
    resid = (spec.audio_weight * rng.normal(size=draws) / np.sqrt(n_a)
             + spec.visual_weight * rng.normal(size=draws) / np.sqrt(n_v)
             + spec.noise_std * rng.normal(size=draws))
    a = np.abs(resid)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(draws))


def collate(samples: list[Sample], audio_dim: int | None = None, visual_dim: int | None = None) -> MultimodalBatch:
    """Pad a list of ragged samples into a batch with masks."""
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    b = len(samples)
    d_a = audio_dim if audio_dim is not None else samples[0].audio.shape[1]
    d_v = visual_dim if visual_dim is not None else samples[0].visual.shape[1]
    t_t = max(len(s.tokens) for s in samples)
    t_a = max(len(s.audio) for s in samples)
    t_v = max(len(s.visual) for s in samples)
    ids = np.full((b, t_t), PAD_ID, dtype=np.int64)
    tm = np.zeros((b, t_t), bool)
    audio = np.zeros((b, t_a, d_a))
    am = np.zeros((b, t_a), bool)
    visual = np.zeros((b, t_v, d_v))
    vm = np.zeros((b, t_v), bool)
    for i, s in enumerate(samples):
        ids[i, :len(s.tokens)] = s.tokens
        tm[i, :len(s.tokens)] = True
        audio[i, :len(s.audio)] = s.audio
        am[i, :len(s.audio)] = True
        visual[i, :len(s.visual)] = s.visual
        vm[i, :len(s.visual)] = True
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return MultimodalBatch(ids, tm, audio, am, visual, vm, labels)


def iter_batches(samples: list[Sample], batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]])


# ------------------------------------------------------------------ jsonl io


def save_jsonl(split: DatasetSplit, path) -> None:
    header = {"format": FORMAT, "version": VERSION, "audio_dim": split.audio_dim,
              "visual_dim": split.visual_dim,
              "counts": {name: len(part) for name, part in split.parts()}}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for _, part in split.parts():
            for s in part:
                rec = {"tokens": s.tokens.tolist(), "audio": s.audio.tolist(),
                       "visual": s.visual.tolist(), "label": s.label}
                fh.write(json.dumps(rec) + "\n")


def _frames(value, width: int, key: str, lineno: int) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise SchemaError(f"line {lineno}: {key!r} must be a non-empty list of frames")
    for frame in value:
        if not isinstance(frame, list) or len(frame) != width:
            raise SchemaError(f"line {lineno}: {key!r} frame width {len(frame) if isinstance(frame, list) else '?'}"
                              f" does not match header width {width}")
    return np.array(value, dtype=np.float64)


def load_jsonl(path) -> DatasetSplit:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise SchemaError(f"line 1: malformed header ({err.msg})") from None
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise SchemaError(f"line 1: expected format {FORMAT!r} version {VERSION}")
    d_a, d_v = int(header["audio_dim"]), int(header["visual_dim"])
    counts = header.get("counts", {})
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise SchemaError(f"line {lineno}: malformed JSON ({err.msg})") from None
        if not isinstance(rec, dict) or set(rec) != {"tokens", "audio", "visual", "label"}:
            raise SchemaError(f"line {lineno}: expected keys tokens/audio/visual/label")
        tokens = rec["tokens"]
        if not isinstance(tokens, list) or not tokens or not all(isinstance(t, int) for t in tokens):
            raise SchemaError(f"line {lineno}: 'tokens' must be a non-empty list of integers")
        label = rec["label"]
        if isinstance(label, bool) or not isinstance(label, (int, float)) or not -3.0 <= label <= 3.0:
            raise SchemaError(f"line {lineno}: 'label' must be a number in [-3, 3]")
        samples.append(Sample(np.array(tokens, dtype=np.int64), _frames(rec["audio"], d_a, "audio", lineno),
                              _frames(rec["visual"], d_v, "visual", lineno), float(label)))
    n_train, n_val = counts.get("train", len(samples)), counts.get("val", 0)
    n_test = counts.get("test", 0)
    if n_train + n_val + n_test != len(samples):
        raise SchemaError(f"header counts {counts} do not match {len(samples)} records")
    return DatasetSplit(samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:], d_a, d_v)
