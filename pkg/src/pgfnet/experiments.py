"""Run configuration and the train / ablation / gate-trace workflows behind the CLI."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import ConfigError, from_dict
from .data import DatasetSplit, SynthSpec, generate, load_jsonl
from .gradcheck import GradcheckConfig
from .metrics import MetricsReport, evaluate
from .model import AblationFlags, ModelConfig, PGFNet
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything one CLI invocation needs. ``seed`` drives model init, shuffling and dropout."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    dataset_path: Optional[str] = None
    out_dir: str = "runs/default"
    seed: int = 0
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return from_dict(cls, data)

    def to_dict(self) -> dict:
        return asdict(self)


ABLATIONS: list[AblationFlags] = [
    AblationFlags(),
    AblationFlags(use_cross_attention=False),
    AblationFlags(use_gate=False),
    AblationFlags(use_refiner=False),
    AblationFlags(use_cross_attention=False, use_gate=False),
    AblationFlags(use_cross_attention=False, use_refiner=False),
    AblationFlags(use_gate=False, use_refiner=False),
]


def load_dataset(run: RunConfig) -> DatasetSplit:
    split = load_jsonl(run.dataset_path) if run.dataset_path else generate(run.data)
    check_compatible(run.model, split)
    return split


def check_compatible(model: ModelConfig, split: DatasetSplit) -> None:
    if split.audio_dim != model.audio_dim:
        raise ConfigError(f"dataset audio_dim {split.audio_dim} != {model.audio_dim}", "model.audio_dim")
    if split.visual_dim != model.visual_dim:
        raise ConfigError(f"dataset visual_dim {split.visual_dim} != {model.visual_dim}", "model.visual_dim")
    samples = split.all()
    if not samples:
        return
    checks = (("max_text_len", max(len(s.tokens) for s in samples)),
              ("max_audio_len", max(len(s.audio) for s in samples)),
              ("max_visual_len", max(len(s.visual) for s in samples)),
              ("vocab_size", max(int(s.tokens.max()) for s in samples) + 1))
    for key, need in checks:
        if getattr(model, key) < need:
            raise ConfigError(f"dataset needs at least {need}", f"model.{key}")


def train_model(run: RunConfig, split: DatasetSplit, log_path=None) -> tuple[PGFNet, list[dict], MetricsReport]:
    model = PGFNet(run.model, seed=run.seed)
    tc = dataclasses.replace(run.train, seed=run.seed)
    model, history = fit(model, split.train, split.val, tc, log_path=log_path)
    return model, history, evaluate(model, split.val, tc.batch_size)


def export_gate_trace(history: list[dict], path) -> bool:
    """Write one CSV row per (epoch, layer). Returns False (header only) when no gate ran."""
    rows = [(rec["epoch"], int(layer), s["mean"], s["std"], s["frac_open"])
            for rec in history for layer, s in sorted(rec.get("gate", {}).items(), key=lambda kv: int(kv[0]))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "layer", "mean", "std", "frac_open"])
        w.writerows(rows)
    if not rows:
        log.warning("no gate statistics in history (gate ablated?); wrote header only to %s", path)
    return bool(rows)


def run_train(run: RunConfig, out: Path) -> MetricsReport:
    out.mkdir(parents=True, exist_ok=True)
    split = load_dataset(run)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True))
    model, history, report = train_model(run, split, log_path=out / "history.jsonl")
    save_checkpoint(model, out / "model.pgf", extra={"val_report": asdict(report)})
    (out / "val_report.json").write_text(report.to_json())
    export_gate_trace(history, out / "gate_trace.csv")
    return report


def _cell(args) -> dict:
    run, flags, seed = args
    run = dataclasses.replace(run, seed=seed, model=run.model.replace(ablation=flags))
    split = load_dataset(run)
    model, history, val = train_model(run, split)
    test = evaluate(model, split.test, run.train.batch_size)
    return {"variant": flags.label, "seed": seed, "trainable_params": model.num_trainable(),
            "epochs": len(history), "val_mae": val.mae, "test_mae": test.mae, "test_corr": test.corr,
            "test_acc2": test.acc2, "test_acc7": test.acc7, "test_f1": test.f1}


def run_ablation(run: RunConfig, n_seeds: int, jobs: int = 1, variants=None) -> list[dict]:
    variants = ABLATIONS if variants is None else variants
    cells = [(run, flags, run.seed + i) for flags in variants for i in range(n_seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_cell, cells))
    return [_cell(c) for c in cells]


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for label in dict.fromkeys(r["variant"] for r in rows):
        group = [r for r in rows if r["variant"] == label]
        summary = {"variant": label, "seeds": len(group), "trainable_params": group[0]["trainable_params"]}
        for key in ("val_mae", "test_mae", "test_corr", "test_acc2", "test_acc7", "test_f1"):
            vals = np.array([r[key] for r in group])
            summary[key] = float(vals.mean())
            if key == "test_mae":
                summary["test_mae_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(summary)
    return out


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
