import numpy as np
import pytest
from hypothesis import settings

from pgfnet import tensor as T
from pgfnet.model import ModelConfig, MultimodalBatch

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _train_mode():
    # tests that flip the global mode must not leak it
    T.set_training(True)
    yield
    T.set_training(True)


def toy_config(**overrides) -> ModelConfig:
    base = dict(hidden_dim=8, num_layers=2, fusion_start=0, num_heads=2, ffn_dim=16, vocab_size=20,
                max_text_len=8, max_audio_len=5, max_visual_len=5, audio_dim=3, visual_dim=3,
                lora_rank=2, adapter_bottleneck=4, head_hidden=4, dropout_p=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def make_batch(cfg: ModelConfig, rng: np.random.Generator, batch: int = 3, t_text: int = 6, t_audio: int = 4,
               t_visual: int = 3, ragged: bool = True) -> MultimodalBatch:
    ids = rng.integers(1, cfg.vocab_size, size=(batch, t_text))
    tm = np.ones((batch, t_text), bool)
    am = np.ones((batch, t_audio), bool)
    vm = np.ones((batch, t_visual), bool)
    if ragged:
        for i in range(batch):
            tm[i, rng.integers(2, t_text + 1):] = False
            am[i, rng.integers(1, t_audio + 1):] = False
            vm[i, rng.integers(1, t_visual + 1):] = False
    return MultimodalBatch(ids, tm, rng.normal(size=(batch, t_audio, cfg.audio_dim)), am,
                           rng.normal(size=(batch, t_visual, cfg.visual_dim)), vm, rng.uniform(-3, 3, batch))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
