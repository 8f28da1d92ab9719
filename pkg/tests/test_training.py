import json

import numpy as np
import pytest

from pgfnet import tensor as T
from pgfnet.config import ConfigError
from pgfnet.data import SynthSpec, generate
from pgfnet.metrics import MetricsReport, evaluate
from pgfnet.model import ModelConfig, PGFNet
from pgfnet.tensor import Tensor
from pgfnet.training import (AdamWState, EarlyStopping, TrainConfig, TrainingDiverged, adamw_step,
                             clip_grad_norm, fit, l1_loss, steplr)


@pytest.fixture(scope="module")
def small_split():
    return generate(SynthSpec(n_samples=92, seed=3))


def small_model(seed=0, **kw):
    return PGFNet(ModelConfig(hidden_dim=8, ffn_dim=16, head_hidden=8, **kw), seed=seed)


def fake_report(mae):
    return MetricsReport(mae=mae, corr=0.0, acc2=0.0, acc7=0.0, f1=0.0, trainable_params=0, n_samples=1)


# ------------------------------------------------------------------- loss

def test_l1_examples():
    assert l1_loss(Tensor([0.3, -1.0]), [0.3, -1.0]).item() == 0.0
    assert l1_loss(Tensor([1.0, -1.0]), [0.0, 0.0]).item() == 1.0
    assert l1_loss(Tensor([2.5]), [-3.0]).item() == 5.5


def test_l1_zero_subgradient():
    p = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(l1_loss(p, [1.0, 0.0]))
    assert p.grad.tolist() == [0.0, 0.5]


def test_l1_errors():
    with pytest.raises(ValueError):
        l1_loss(Tensor(np.zeros(0)), [])
    with pytest.raises(T.DimensionError):
        l1_loss(Tensor([1.0, 2.0]), [1.0])


# ---------------------------------------------------------------- optimizer

def _single(theta, grad):
    p = Tensor(np.array([theta]), requires_grad=True)
    p.grad = np.array([grad])
    return {"p": p}


def test_adamw_first_step():
    params = _single(1.0, 1.0)
    adamw_step(params, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.0), lr=0.1)
    # t=1: m_hat = g, v_hat = g^2, step = lr * 1 / (1 + eps)
    assert params["p"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_grad_no_decay():
    params = _single(0.7, 0.0)
    adamw_step(params, AdamWState(), TrainConfig(weight_decay=0.0), lr=0.5)
    assert params["p"].data[0] == 0.7


def test_adamw_pure_decay():
    params = _single(2.0, 0.0)
    adamw_step(params, AdamWState(), TrainConfig(weight_decay=0.1), lr=1.0)
    assert params["p"].data[0] == pytest.approx(1.8, abs=1e-15)


def test_adamw_matches_reference_over_steps(rng):
    cfg = TrainConfig(lr=0.01, weight_decay=0.05)
    theta = rng.normal(size=4)
    grads = rng.normal(size=(5, 4))
    p = Tensor(theta.copy(), requires_grad=True)
    state = AdamWState()
    m = v = np.zeros(4)
    ref = theta.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        adamw_step({"p": p}, state, cfg, cfg.lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - cfg.lr * cfg.weight_decay * ref
        ref = ref - cfg.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + cfg.eps)
    np.testing.assert_allclose(p.data, ref, atol=1e-14)


def test_adamw_skips_frozen_and_names_nan():
    frozen = Tensor(np.ones(2))
    live = Tensor(np.ones(2), requires_grad=True)
    live.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="layers.0.lora.a_q"):
        adamw_step({"emb": frozen, "layers.0.lora.a_q": live}, AdamWState(), TrainConfig(), 1e-3)
    assert frozen.data.tolist() == [1.0, 1.0]


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-12)


# ---------------------------------------------------------------- schedule

def test_steplr_examples():
    cfg = TrainConfig()
    assert steplr(0, cfg) == 1e-3
    assert steplr(8, cfg) == 1e-3
    assert steplr(9, cfg) == 1e-4
    assert steplr(18, cfg) == 1e-5
    assert steplr(5, TrainConfig(lr=0.3, gamma=0.5, step_size=2)) == 0.075
    with pytest.raises(ValueError):
        steplr(-1, cfg)


@pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(gamma=1.5), dict(patience=0), dict(lr=-1.0)])
def test_train_config_invariants(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# ---------------------------------------------------------- early stopping

def test_early_stopping_rule_trace():
    stopper = EarlyStopping(patience=2)
    trace = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9]
    stopped = [stopper.update(e, m) for e, m in enumerate(trace)]
    assert stopped.index(True) == 4
    assert stopper.state.best_epoch == 1


def _scripted(values):
    it = iter(values)
    return lambda model: fake_report(next(it))


def test_fit_stops_on_scripted_trace(small_split):
    cfg = TrainConfig(patience=2, max_epochs=20, batch_size=32)
    _, history = fit(small_model(), small_split.train[:32], small_split.val, cfg,
                     validate=_scripted([1.0, 0.9] + [0.9] * 20))
    assert [h["epoch"] for h in history] == [0, 1, 2, 3, 4]


def test_fit_runs_max_epochs_when_patience_large(small_split):
    cfg = TrainConfig(patience=5, max_epochs=3, batch_size=32)
    _, history = fit(small_model(), small_split.train[:32], small_split.val, cfg, validate=_scripted([1.0] * 3))
    assert len(history) == 3


def test_fit_restores_best_epoch(small_split):
    model = small_model()
    snapshots = []

    def validate(m):
        snapshots.append({k: v.copy() for k, v in m.state().items()})
        return fake_report([0.5, 0.2, 0.4, 0.6][len(snapshots) - 1])

    fit(model, small_split.train[:32], small_split.val, TrainConfig(max_epochs=4, batch_size=16), validate=validate)
    for k, v in model.state().items():
        assert np.array_equal(v, snapshots[1][k])


def test_fit_diverged_keeps_history(small_split):
    with pytest.raises(TrainingDiverged) as info:
        fit(small_model(), small_split.train[:16], small_split.val, TrainConfig(max_epochs=5, batch_size=16),
            validate=_scripted([0.5, float("nan")]))
    assert len(info.value.history) == 2


def test_fit_rejects_empty(small_split):
    with pytest.raises(ValueError):
        fit(small_model(), [], small_split.val, TrainConfig())


# ---------------------------------------------------------------- contracts

def test_same_seed_bit_identical(small_split):
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=5)
    runs = []
    for _ in range(2):
        model, history = fit(small_model(seed=2, dropout_p=0.2), small_split.train, small_split.val, cfg)
        runs.append((json.dumps(history), {k: v.tobytes() for k, v in model.state().items()}))
    assert runs[0] == runs[1]


def test_frozen_parameters_untouched(small_split):
    model = small_model(unfreeze_top_k=0)
    before = {k: p.data.copy() for k, p in model.frozen()}
    assert before
    fit(model, small_split.train, small_split.val, TrainConfig(max_epochs=2, batch_size=16))
    for k, p in model.frozen():
        assert p.data.tobytes() == before[k].tobytes()


def test_zero_lr_and_decay_changes_nothing(small_split):
    model = small_model()
    before = {k: v.copy() for k, v in model.state().items()}
    fit(model, small_split.train, small_split.val, TrainConfig(lr=0.0, weight_decay=0.0, max_epochs=2, batch_size=16))
    for k, v in model.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_loss_decreases_on_small_set(small_split):
    cfg = TrainConfig(max_epochs=6, batch_size=16, patience=10, lr=3e-3)
    _, history = fit(small_model(), small_split.train[:64], small_split.val, cfg)
    assert len(history) == 6
    assert history[5]["train_loss"] < history[0]["train_loss"]


def test_best_model_not_worse_than_history(small_split):
    model, history = fit(small_model(), small_split.train, small_split.val,
                         TrainConfig(max_epochs=4, batch_size=16, lr=3e-3))
    final = evaluate(model, small_split.val).mae
    assert all(final <= h["val"]["mae"] for h in history)
    assert final == min(h["val"]["mae"] for h in history)


def test_history_log_records(small_split, tmp_path):
    path = tmp_path / "h.jsonl"
    _, history = fit(small_model(), small_split.train[:32], small_split.val, TrainConfig(max_epochs=2, batch_size=16),
                     log_path=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines == json.loads(json.dumps(history))
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "val", "gate"}
    assert set(lines[0]["gate"]) == {"0", "1"}
