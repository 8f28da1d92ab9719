"""``pgfnet`` command line: gen | train | eval | gradcheck | count | ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, apply_override
from .data import SchemaError, generate, save_jsonl
from .experiments import (RunConfig, load_dataset, run_ablation, run_train, summarize,
                          write_csv, check_compatible)
from .gradcheck import run_gradcheck
from .metrics import evaluate
from .model import count_trainable_params


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; omitted keys take their defaults")
    common.add_argument("--seed", type=int, help="run seed (model init, shuffling, dropout)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. model.lora_rank=4")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pgfnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write the synthetic dataset as JSONL")
    sub.add_parser("train", parents=[common], help="fit, save checkpoint, history and gate trace")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="defaults to OUT/model.pgf")
    ev.add_argument("--split", choices=("train", "val", "test"), default="val")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the toy model")
    sub.add_parser("count", parents=[common], help="trainable-parameter breakdown")
    ab = sub.add_parser("ablate", parents=[common], help="run the seven ablation variants")
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return p


def resolve_config(args) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config: {err}", "--config") from None
    for assignment in args.set:
        apply_override(data, assignment)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out:
        data["out_dir"] = args.out
    return RunConfig.from_dict(data)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        if args.command == "gen":
            out.mkdir(parents=True, exist_ok=True)
            path = out / "dataset.jsonl"
            split = generate(cfg.data)
            save_jsonl(split, path)
            _emit({"path": str(path), **{k: len(v) for k, v in split.parts()}})
        elif args.command == "train":
            report = run_train(cfg, out)
            _emit({"out_dir": str(out), "val_report": asdict(report)})
        elif args.command == "eval":
            model, _ = load_checkpoint(args.checkpoint or out / "model.pgf")
            split = load_dataset(cfg)
            check_compatible(model.config, split)
            report = evaluate(model, dict(split.parts())[args.split], cfg.train.batch_size)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"eval_{args.split}.json").write_text(report.to_json())
            _emit(asdict(report))
        elif args.command == "gradcheck":
            result = run_gradcheck(cfg.gradcheck)
            _emit(result)
            if result["max_rel_error"] >= 1e-4:
                print(f"gradcheck FAILED: {result['max_rel_error']:.3e} >= 1e-4", file=sys.stderr)
                return 1
        elif args.command == "count":
            _emit(count_trainable_params(cfg.model))
        elif args.command == "ablate":
            if args.seeds < 1:
                raise ConfigError("must be at least 1", "--seeds")
            out.mkdir(parents=True, exist_ok=True)
            rows = run_ablation(cfg, args.seeds, args.jobs)
            write_csv(rows, out / "ablation.csv")
            table = summarize(rows)
            write_csv(table, out / "ablation_summary.csv")
            cols = ("variant", "trainable_params", "val_mae", "test_mae", "test_corr", "test_acc7", "test_f1")
            print("\t".join(cols))
            for row in table:
                print("\t".join(str(row[c]) if isinstance(row[c], (str, int)) else f"{row[c]:.4f}" for c in cols))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (SchemaError, CheckpointError, OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
