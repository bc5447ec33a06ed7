"""Run orchestration shared by the CLI and scripts.

A run is fully described by a :class:`RunConfig`. Training writes a
checkpoint, a loss curve and a ``manifest.json`` holding the resolved config,
its hash and the checkpoint checksum; feeding that manifest back in as a
config file reproduces the run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as gc
from .encoders import DigitCodec, Normalizer
from .evalkit import MetricReport, scalar_report, trajectory_report, write_csv
from .genloop import ScriptedChoices, generate
from .numtext import (
    NUMBER_RE,
    NUMBER_TOKEN_INDEX,
    AlignmentError,
    CharVocab,
    PlaceholderCollisionError,
    encode_turns,
    get_policy,
)
from .seqmodel import ModelConfig, SeqModel, assemble_input
from .seqmodel import AlignmentError as AssemblyAlignmentError
from .synthdrive import TASKS, EpisodeParams, answer_slots, make_records, split_seeds
from .trainer import (
    TASK_KIND,
    VARIANTS,
    Example,
    LossConfig,
    OptimConfig,
    prepare_example,
    train,
    write_curve,
)

log = logging.getLogger(__name__)

ENCODING_TO_VARIANT = {"drivecode": "drivecode", "xval": "xval", "digits": "text"}
CHECKPOINT = "model.ckpt"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    """A dialogue file entry failed alignment or parsing; message carries the line."""


@dataclass(frozen=True)
class RunConfig:
    task: str = "speed"
    variant: str = "drivecode"
    encoding: str = "drivecode"
    seed: int = 0
    steps: int = 3000
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 8
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_train: int = 2000
    n_test: int = 200
    data_seed: int = 0
    horizon: int = 3
    max_steps: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {tuple(VARIANTS)}")
        if VARIANTS[self.variant][0] != self.encoding:
            raise ConfigError(
                f"variant {self.variant!r} uses encoding {VARIANTS[self.variant][0]!r}, "
                f"not {self.encoding!r}"
            )
        for name in ("steps", "batch_size", "d", "n_layers", "n_heads", "n_train", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_test < 0 or self.checkpoint_every < 0:
            raise ConfigError("n_test and checkpoint_every must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.d % self.n_heads or self.d % 2:
            raise ConfigError(f"d={self.d} must be even and divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n_layers=self.n_layers, n_heads=self.n_heads)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, steps=self.steps, batch_size=self.batch_size,
                           seed=self.seed, checkpoint_every=self.checkpoint_every)

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, task_kind=TASK_KIND[self.task])

    def episode_params(self) -> EpisodeParams:
        return EpisodeParams(horizon=self.horizon)


# ---------------------------------------------------------------- config


_ALIASES = {"lambda": "lam"}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _cast(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        return _CASTS[kind](value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None


def read_config_file(path: str | Path) -> dict:
    """Parse ``key=value`` lines, or a run manifest (``.json``) to replay it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return dict(data.get("config", data))
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and flag overrides (flags win)."""
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            merged[_ALIASES.get(key, key)] = value
    task_kind = merged.pop("task_kind", None)
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = {k: _cast(k, v) for k, v in merged.items()}
    if "encoding" in values and "variant" not in values:
        if values["encoding"] not in ENCODING_TO_VARIANT:
            raise ConfigError(f"unknown encoding {values['encoding']!r}")
        values["variant"] = ENCODING_TO_VARIANT[values["encoding"]]
    if "variant" in values and "encoding" not in values:
        if values["variant"] not in VARIANTS:
            raise ConfigError(f"unknown variant {values['variant']!r}")
        values["encoding"] = VARIANTS[values["variant"]][0]
    cfg = RunConfig(**values)
    if task_kind is not None and task_kind != TASK_KIND[cfg.task]:
        raise ConfigError(f"task_kind {task_kind!r} does not match task {cfg.task!r}")
    return cfg


# ---------------------------------------------------------------- data


def dataset_records(cfg: RunConfig, split: str) -> list[dict]:
    train_seeds, test_seeds = split_seeds(cfg.n_train, cfg.n_test, cfg.data_seed)
    seeds = train_seeds if split == "train" else test_seeds
    return make_records(cfg.task, seeds, split, cfg.episode_params())


def load_records(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def prepare_examples(records: Sequence[dict], variant: str, vocab: CharVocab,
                     source: str = "<records>") -> list[Example]:
    out = []
    for lineno, rec in enumerate(records, 1):
        try:
            out.append(prepare_example(rec, variant, vocab))
        except (AlignmentError, PlaceholderCollisionError, AssemblyAlignmentError, KeyError,
                ValueError) as exc:
            raise DataError(f"{source}:{lineno}: dialogue {rec.get('id', '?')!r}: {exc}") from exc
    return out


def fit_record_normalizer(records: Iterable[dict]) -> Normalizer:
    """z-score over every number in the training dialogues.

    Extraction always uses the full numeric conversion so that every variant
    shares the same normaliser for a given training split.
    """
    vals: list[float] = []
    for rec in records:
        policy = get_policy(rec.get("numbers_policy_id", "default"))
        vals.extend(encode_turns(rec["turns"], policy).numbers)
    return Normalizer.fit(vals)


# ---------------------------------------------------------------- train


def _checkpoint_meta(cfg: RunConfig, normalizer: Normalizer) -> dict:
    return {
        "config": cfg.to_dict(),
        "model": cfg.model_config().to_dict(),
        "normalizer": [normalizer.offset, normalizer.scale],
        "encoding": cfg.encoding,
        "variant": cfg.variant,
        "task": cfg.task,
    }


def train_run(cfg: RunConfig, out_dir: str | Path, train_records: Sequence[dict] | None = None,
              source: str = "<generated>") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = CharVocab()
    records = list(train_records) if train_records is not None else dataset_records(cfg, "train")
    examples = prepare_examples(records, cfg.variant, vocab, source)
    normalizer = fit_record_normalizer(records)
    model = SeqModel.create(cfg.model_config(), cfg.seed, normalizer, cfg.encoding)
    meta = _checkpoint_meta(cfg, normalizer)

    result = train(
        model, examples, cfg.optim_config(), cfg.loss_config(), out_dir,
        save_fn=lambda p: gc.save_checkpoint(p, model.params, meta),
    )
    checksum = gc.save_checkpoint(out_dir / CHECKPOINT, model.params, meta)
    write_curve(out_dir / "loss.csv", result.curve)
    manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "data_source": source,
        "n_examples": len(examples),
        "checkpoint": CHECKPOINT,
        "checkpoint_checksum": f"{checksum:016x}",
        "final": result.curve[-1],
    }
    write_manifest(out_dir, manifest)
    return manifest


def write_manifest(out_dir: str | Path, manifest: dict, name: str = "manifest.json") -> None:
    Path(out_dir, name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> tuple[SeqModel, RunConfig]:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT
    params, meta = gc.load_checkpoint(path)
    cfg = resolve_config(meta["config"])
    offset, scale = meta["normalizer"]
    model = SeqModel(ModelConfig(**meta["model"]), params, Normalizer(offset, scale), cfg.encoding)
    return model, cfg


# ---------------------------------------------------------------- generate


def prompt_embeddings(model: SeqModel, ex: Example) -> np.ndarray:
    ids = ex.ids[: ex.prompt_len]
    n_num = int(np.count_nonzero(ids == NUMBER_TOKEN_INDEX))
    inp = assemble_input(model, ids, ex.numbers[:n_num], ex.obs if ex.obs.size else None)
    return inp.embeddings.data[0]


def predict(model: SeqModel, examples: Sequence[Example], max_steps: int) -> list[dict]:
    out = []
    for ex in examples:
        prompt = prompt_embeddings(model, ex)
        steps = min(max_steps, model.max_seq_len - len(prompt))
        res = generate(model, prompt, steps)
        out.append({
            "id": ex.id,
            "text": res.text,
            "numbers": [float(x) for x in res.numbers],
            "steps": res.step_count,
            "numeric_steps": res.per_number_steps,
            "truncated": res.truncated,
        })
    return out


def write_predictions(path: str | Path, preds: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")


# ---------------------------------------------------------------- evaluate


def ground_truth(record: dict) -> list[float]:
    policy = get_policy(record.get("numbers_policy_id", "default"))
    answer = [t for t in record["turns"] if t["role"] == "assistant"]
    return list(encode_turns(answer, policy).numbers)


def prediction_values(pred: dict) -> list[float]:
    """Numbers from a prediction line.

    Regressed values are used when present; otherwise numbers are parsed
    from the text. A ground-truth record (with ``turns``) is also accepted.
    """
    if "turns" in pred:
        return ground_truth(pred)
    if pred.get("numbers"):
        return [float(x) for x in pred["numbers"]]
    return [float(m.group()) for m in NUMBER_RE.finditer(pred.get("text", ""))]


def evaluate(preds: Sequence[dict], records: Sequence[dict], task: str,
             horizon: int = 3) -> MetricReport:
    """Score predictions against records, matched by ``id``.

    Predictions with too few numbers are padded with zeros (too many are
    truncated); both cases are counted in ``notes['parse_failures']``.
    """
    by_id = {p["id"]: p for p in preds}
    k = answer_slots(task, horizon)
    P, G = [], []
    failures = missing = 0
    for rec in records:
        gt = ground_truth(rec)
        if len(gt) != k:
            raise DataError(f"record {rec.get('id')!r}: expected {k} answer numbers, got {len(gt)}")
        pred = by_id.get(rec["id"])
        vals = prediction_values(pred) if pred is not None else []
        missing += pred is None
        if len(vals) != k:
            failures += 1
            vals = (vals + [0.0] * k)[:k]
        P.append(vals)
        G.append(gt)
    if task == "traj":
        report = trajectory_report(np.reshape(P, (-1, horizon, 2)), np.reshape(G, (-1, horizon, 2)))
    else:
        rep = scalar_report(task, "m/s" if task == "speed" else "", np.ravel(P), np.ravel(G))
        report = MetricReport([rep])
    report.notes.update({"parse_failures": failures, "missing": missing, "n": len(records)})
    return report


def headline(report: MetricReport, task: str) -> float:
    """Main error figure: MAE for scalar tasks, mean point error for trajectories."""
    f = report.by_field()
    return f["point"].mae if task == "traj" else f[task].mae


def train_and_evaluate(cfg: RunConfig, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    manifest = train_run(cfg, out_dir)
    model, _ = load_model(out_dir)
    test_records = dataset_records(cfg, "test")
    examples = prepare_examples(test_records, cfg.variant, model.vocab)
    preds = predict(model, examples, cfg.max_steps)
    write_predictions(out_dir / "predictions.jsonl", preds)
    report = evaluate(preds, test_records, cfg.task, cfg.horizon)
    report.write(out_dir, "metrics")
    manifest.update({"metrics": "metrics.json", "headline": headline(report, cfg.task)})
    write_manifest(out_dir, manifest)
    return {"manifest": manifest, "report": report}


# ---------------------------------------------------------------- compare


def compare(cfg: RunConfig, out_dir: str | Path, variants: Sequence[str] = tuple(VARIANTS)) -> list[dict]:
    """Train and evaluate each variant under the same seed, data and budget."""
    out_dir = Path(out_dir)
    rows = []
    for v in variants:
        vcfg = replace(cfg, variant=v, encoding=VARIANTS[v][0])
        res = train_and_evaluate(vcfg, out_dir / v)
        row = {"variant": v, "encoding": vcfg.encoding, "seed": vcfg.seed, "steps": vcfg.steps}
        for f in res["report"].fields:
            row.update({f"{f.field}_{k}": val for k, val in f.row().items()
                        if k not in ("field", "unit", "n")})
        row["parse_failures"] = res["report"].notes["parse_failures"]
        row["headline"] = res["manifest"]["headline"]
        rows.append(row)
    write_csv(out_dir / "compare.csv", rows)
    (out_dir / "compare.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_manifest(out_dir, {"command": "compare", "config": cfg.to_dict(),
                             "config_hash": cfg.config_hash(), "seed": cfg.seed,
                             "variants": list(variants)})
    return rows


# ---------------------------------------------------------------- bench


def answer_script(ex: Example, vocab: CharVocab, num_id: int) -> list[int]:
    """Ground-truth answer tokens after the assistant marker, ``<num>`` for placeholders."""
    tail = ex.ids[ex.prompt_len:]
    return [num_id if t == NUMBER_TOKEN_INDEX else int(t) for t in tail]


def recount_numeric_steps(tokens: Sequence[int], vocab: CharVocab) -> int:
    """Independent recount from a token stream: one per ``<num>``, one per digit character."""
    body = [t for t in tokens if t != vocab.eos_id]
    n_num = sum(t == vocab.num_id for t in body)
    text = "".join(vocab.itos[t] for t in body if t != vocab.num_id)
    return n_num + sum(len(m.group()) for m in NUMBER_RE.finditer(text))


def bench(cfg: RunConfig, n: int, out_dir: str | Path | None = None,
          variants: Sequence[str] = tuple(VARIANTS), checkpoints: dict | None = None) -> list[dict]:
    """Decoding-step and latency table under forced (ground-truth) decoding.

    Each model follows the reference answer token by token, so step counts
    depend only on the output encoding. Models come from ``checkpoints`` when
    given, otherwise they are freshly initialised with ``cfg.seed``.
    """
    vocab = CharVocab()
    records = make_records(cfg.task, split_seeds(0, n, cfg.data_seed)[1], "test", cfg.episode_params())
    codec = DigitCodec(2)
    rows = []
    for v in variants:
        if checkpoints and v in checkpoints:
            model, _ = load_model(checkpoints[v])
        else:
            model = SeqModel.create(cfg.model_config(), cfg.seed,
                                    fit_record_normalizer(records), VARIANTS[v][0])
        examples = prepare_examples(records, v, vocab)
        numeric = total = 0
        identity_ok = True
        formatted = 0
        latency = []
        for ex in examples:
            script = answer_script(ex, vocab, model.num_id)
            forced = ScriptedChoices(model, script, ex.prompt_len)
            prompt = prompt_embeddings(model, ex)
            t0 = time.perf_counter()
            res = generate(forced, prompt, len(script), codec)
            latency.append(time.perf_counter() - t0)
            numeric += res.per_number_steps
            total += res.step_count
            identity_ok &= res.per_number_steps == recount_numeric_steps(res.tokens, vocab)
            formatted += sum(len(codec.format(x)) for x in ex.answer_numbers)
        rows.append({
            "variant": v,
            "encoding": VARIANTS[v][0],
            "n": len(examples),
            "numbers": int(sum(len(ex.answer_numbers) for ex in examples)),
            "numeric_steps": numeric,
            "total_steps": total,
            "formatted_digit_steps": formatted,
            "identity_ok": bool(identity_ok),
            "latency_ms_mean": 1000.0 * float(np.mean(latency)),
            "latency_ms_p50": 1000.0 * float(np.median(latency)),
        })
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "bench.csv", rows)
        write_manifest(out_dir, {"command": "bench", "config": cfg.to_dict(),
                                 "config_hash": cfg.config_hash(), "seed": cfg.seed, "n": n})
    return rows


# ---------------------------------------------------------------- directional study


def directional_study(out_dir: str | Path, seeds: Sequence[int] = (0, 1, 2), steps: int = 3000,
                      copy_steps: int = 3000, n_test: int = 200,
                      variants: Sequence[str] = ("drivecode", "variant", "text")) -> dict:
    """Speed-task MAE per variant and copy-task MAE for drivecode, over seeds.

    Each seed sets both the model initialisation and the data split, and
    every variant sees the same seed, data and step budget.
    """
    out_dir = Path(out_dir)
    speed: dict[str, list[float]] = {v: [] for v in variants}
    copy: list[float] = []
    timings: dict[str, float] = {}
    for s in seeds:
        for v in variants:
            cfg = RunConfig(task="speed", variant=v, encoding=VARIANTS[v][0], seed=s,
                            data_seed=s, steps=steps, n_test=n_test)
            t0 = time.perf_counter()
            speed[v].append(train_and_evaluate(cfg, out_dir / f"speed-{v}-s{s}")["manifest"]["headline"])
            timings[f"speed-{v}-s{s}"] = time.perf_counter() - t0
        cfg = RunConfig(task="copy", seed=s, data_seed=s, steps=copy_steps, n_test=n_test)
        t0 = time.perf_counter()
        copy.append(train_and_evaluate(cfg, out_dir / f"copy-drivecode-s{s}")["manifest"]["headline"])
        timings[f"copy-drivecode-s{s}"] = time.perf_counter() - t0
    summary = {
        "seeds": list(seeds),
        "speed_mae": speed,
        "speed_median": {v: float(np.median(x)) for v, x in speed.items()},
        "copy_mae": copy,
        "copy_median": float(np.median(copy)),
        "seconds": timings,
    }
    (out_dir / "directional.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
