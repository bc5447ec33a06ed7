"""Command-line entry point: gen-data, train, generate, eval, compare, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .gradcore import ChecksumError
from .numtext import CharVocab
from .synthdrive import TASKS, make_split
from .trainer import VARIANTS, TrainingDiverged


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file or a previous run's manifest.json")
    p.add_argument("--encoding", choices=("drivecode", "xval", "digits"))
    p.add_argument("--variant", choices=tuple(VARIANTS))
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int, help="generation budget per answer")
    p.add_argument("--out-dir", default="runs/latest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="numcode", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/test JSONL")
    _common(p)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", help="training JSONL (default: generate from the config)")

    p = sub.add_parser("generate", help="greedy-decode answers for a dialogue file")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", help="dialogue JSONL (default: the config's test split)")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True, help="ground-truth JSONL")

    p = sub.add_parser("compare", help="train and evaluate all four variants")
    _common(p)

    p = sub.add_parser("bench", help="decoding-step and latency table")
    _common(p)
    p.add_argument("--n", type=int, default=100, help="number of answers")
    return parser


def _config(args) -> ex.RunConfig:
    file_values = ex.read_config_file(args.config) if args.config else {}
    keys = ("encoding", "variant", "task", "seed", "steps", "lam", "lr", "n_train", "n_test",
            "data_seed", "max_steps")
    overrides = {k: getattr(args, k) for k in keys}
    return ex.resolve_config(file_values, overrides)


def _run(args) -> dict:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = {"command": args.command, "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(), "seed": cfg.seed}

    if args.command == "gen-data":
        train_path, test_path = make_split(cfg.n_train, cfg.n_test, cfg.data_seed, out,
                                           cfg.task, cfg.episode_params())
        ex.write_manifest(out, {**base, "train": train_path.name, "test": test_path.name})
        return {"train": str(train_path), "test": str(test_path)}

    if args.command == "train":
        records = ex.load_records(args.data) if args.data else None
        return ex.train_run(cfg, out, records, source=args.data or "<generated>")

    if args.command == "generate":
        model, ckpt_cfg = ex.load_model(args.checkpoint)
        source = args.data or "<generated test split>"
        records = ex.load_records(args.data) if args.data else ex.dataset_records(ckpt_cfg, "test")
        examples = ex.prepare_examples(records, ckpt_cfg.variant, CharVocab(), source)
        preds = ex.predict(model, examples, cfg.max_steps)
        ex.write_predictions(out / "predictions.jsonl", preds)
        ex.write_manifest(out, {**base, "checkpoint": str(args.checkpoint),
                                "checkpoint_config_hash": ckpt_cfg.config_hash(),
                                "data_source": source, "n": len(preds)})
        return {"predictions": str(out / "predictions.jsonl"), "n": len(preds)}

    if args.command == "eval":
        preds = ex.load_records(args.pred)
        records = ex.load_records(args.data)
        task = args.task or (records[0].get("task", cfg.task) if records else cfg.task)
        report = ex.evaluate(preds, records, task, cfg.horizon)
        report.write(out, "metrics")
        ex.write_manifest(out, {**base, "pred": args.pred, "data": args.data})
        return report.to_json()

    if args.command == "compare":
        rows = ex.compare(cfg, out)
        return {"rows": rows}

    if args.command == "bench":
        rows = ex.bench(cfg, args.n, out)
        return {"rows": rows}

    raise ex.ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except (ex.ConfigError, ex.DataError, ChecksumError, TrainingDiverged,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
