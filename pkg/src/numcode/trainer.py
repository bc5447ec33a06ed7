"""Training objective and optimisation loop.

The objective is next-token cross-entropy plus a weighted regression term on
the number head, evaluated at the hidden state just before each supervised
number placeholder.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .encoders import Normalizer
from .numtext import (
    IGNORE_INDEX,
    NUMBER_TOKEN_INDEX,
    CharVocab,
    assistant_mask,
    build_labels,
    encode_turns,
    get_policy,
    tokenize,
)
from .seqmodel import NumberHead, SeqModel, assemble_batch

log = logging.getLogger(__name__)

# variant -> (encoding, roles whose numbers become placeholders)
VARIANTS = {
    "drivecode": ("drivecode", ("system", "user", "assistant")),
    "variant": ("drivecode", ("assistant",)),
    "text": ("digits", ()),
    "xval": ("xval", ("system", "user", "assistant")),
}
TASK_KIND = {"speed": "scalar", "copy": "scalar", "traj": "trajectory"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    task_kind: str = "scalar"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.task_kind not in ("scalar", "trajectory"):
            raise ValueError(f"unknown task_kind {self.task_kind!r}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    steps: int = 3000
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


# ---------------------------------------------------------------- examples


@dataclass
class Example:
    """One tokenised dialogue ready for batching."""

    id: str
    ids: np.ndarray
    labels: np.ndarray
    numbers: np.ndarray  # aligned with number placeholders in ids
    obs: np.ndarray  # [n_obs, obs_dim]
    target_positions: np.ndarray  # supervised placeholder positions
    target_values: np.ndarray
    prompt_len: int  # tokens up to and including the first assistant marker
    answer_numbers: np.ndarray  # ground truth in physical units


def prepare_example(record: dict, variant: str, vocab: CharVocab) -> Example:
    encoding, roles = VARIANTS[variant]
    policy = get_policy(record.get("numbers_policy_id", "default"))
    turns = record["turns"]
    dialogue = encode_turns(turns, policy, convert_roles=roles)
    seq = tokenize(dialogue, vocab)
    seq = build_labels(seq, assistant_mask(seq, vocab))
    ids = np.asarray(seq.ids, dtype=np.int64)
    labels = np.asarray(seq.labels, dtype=np.int64)
    numbers = np.asarray(dialogue.numbers, dtype=np.float64)
    if len(seq.numeric_positions) != len(numbers):
        raise ValueError(f"{record.get('id')}: placeholder/number count mismatch")
    pos = np.asarray(seq.numeric_positions, dtype=np.int64)
    supervised = labels[pos] == NUMBER_TOKEN_INDEX if pos.size else np.zeros(0, bool)
    answer = encode_turns([t for t in turns if t["role"] == "assistant"], policy)
    marker = np.flatnonzero(ids == vocab.assistant_id)
    obs = np.asarray(record.get("obs", []), dtype=np.float64)
    return Example(
        id=str(record.get("id", "")),
        ids=ids,
        labels=labels,
        numbers=numbers,
        obs=obs.reshape(len(obs), -1) if obs.size else np.zeros((0, 0)),
        target_positions=pos[supervised],
        target_values=numbers[supervised],
        prompt_len=int(marker[0]) + 1 if marker.size else len(ids),
        answer_numbers=np.asarray(answer.numbers, dtype=np.float64),
    )


def fit_normalizer(examples: Sequence[Example]) -> Normalizer:
    vals = [x for ex in examples for x in ex.numbers]
    vals += [x for ex in examples for x in ex.answer_numbers] if not vals else []
    return Normalizer.fit(vals)


@dataclass
class Batch:
    ids: np.ndarray  # [B, L]
    targets: np.ndarray  # [B, L] next-token targets (shifted)
    numbers: list[np.ndarray]
    obs: list[np.ndarray]
    num_index: tuple[np.ndarray, np.ndarray]  # (b, i_m)
    num_values: np.ndarray


def collate(examples: Sequence[Example], vocab: CharVocab) -> Batch:
    B = len(examples)
    L = max(len(ex.ids) for ex in examples)
    ids = np.full((B, L), vocab.pad_id, dtype=np.int64)
    labels = np.full((B, L), IGNORE_INDEX, dtype=np.int64)
    bi, pi, vals = [], [], []
    for b, ex in enumerate(examples):
        n = len(ex.ids)
        ids[b, :n] = ex.ids
        labels[b, :n] = ex.labels
        bi.extend([b] * len(ex.target_positions))
        pi.extend(ex.target_positions.tolist())
        vals.extend(ex.target_values.tolist())
    return Batch(
        ids=ids,
        targets=shift_labels(labels),
        numbers=[ex.numbers for ex in examples],
        obs=[ex.obs for ex in examples],
        num_index=(np.asarray(bi, dtype=np.int64), np.asarray(pi, dtype=np.int64)),
        num_values=np.asarray(vals, dtype=np.float64),
    )


def shift_labels(labels: np.ndarray) -> np.ndarray:
    """Targets for logits: position i predicts label i+1; last position ignored."""
    out = np.full_like(labels, IGNORE_INDEX)
    out[..., :-1] = labels[..., 1:]
    return out


# ---------------------------------------------------------------- losses


def text_loss(logits: gc.Tensor, targets: np.ndarray, num_id: int) -> tuple[gc.Tensor, int]:
    """Summed next-token cross-entropy per sequence, averaged over the batch.

    ``targets`` are already shifted (see :func:`shift_labels`). Number
    placeholders are supervised as the reserved ``num_id`` class.
    """
    targets = np.where(targets == NUMBER_TOKEN_INDEX, num_id, targets)
    n_seq = logits.shape[0] if logits.data.ndim == 3 else 1
    loss, n = gc.softmax_cross_entropy(logits, targets, IGNORE_INDEX, reduction="sum")
    return (gc.mul(loss, 1.0 / n_seq) if n_seq != 1 else loss), n


def numeric_predictions(hidden: gc.Tensor, positions, head: NumberHead) -> gc.Tensor:
    """Normalised predictions ``r(h[i_m - 1])`` for each target position ``i_m``.

    ``positions`` is ``(batch_idx, i_m)`` for a ``[B, L, d]`` hidden tensor,
    or a plain index array for ``[L, d]``.
    """
    if hidden.data.ndim == 2:
        pos = np.asarray(positions, dtype=np.int64)
        index: tuple = (pos - 1,)
    else:
        b, pos = (np.asarray(a, dtype=np.int64) for a in positions)
        index = (b, pos - 1)
    if pos.size == 0:
        return gc.Tensor(np.zeros(0))
    if pos.min() < 1:
        raise ValueError("a number target at position 0 has no preceding hidden state")
    return head(gc.gather_rows(hidden, index))


def scalar_loss(preds, targets) -> tuple[gc.Tensor, int]:
    return gc.l1_loss(gc.as_tensor(preds), np.asarray(targets, dtype=np.float64))


def traj_loss(preds, targets) -> tuple[gc.Tensor, int]:
    """Mean L2 distance over waypoints formed from consecutive value pairs."""
    preds = gc.as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise gc.DimensionError(f"traj_loss: {preds.shape} vs {targets.shape}")
    if targets.size % 2:
        raise ValueError(f"trajectory targets need an even count, got {targets.size}")
    if targets.size == 0:
        return gc.Tensor(0.0), 0
    diff = gc.reshape(gc.sub(preds, gc.Tensor(targets)), (-1, 2))
    return gc.mean(gc.l2_norm_rows(diff)), targets.size // 2


def total_loss(text_l: gc.Tensor, num_l: gc.Tensor, cfg: LossConfig) -> gc.Tensor:
    return gc.add(text_l, gc.mul(num_l, cfg.lam))


@dataclass
class LossParts:
    total: gc.Tensor
    text: float
    num: float
    n_text: int
    n_num: int


def batch_loss(model: SeqModel, batch: Batch, cfg: LossConfig) -> LossParts:
    inp = assemble_batch(model, batch.ids, batch.numbers, batch.obs)
    hidden = model.forward(inp)
    t_loss, n_text = text_loss(model.logits(hidden), batch.targets, model.num_id)
    z = numeric_predictions(hidden, batch.num_index, model.head)
    z_true = model.normalizer.normalize(batch.num_values)
    if cfg.task_kind == "trajectory":
        n_loss, n_num = traj_loss(z, z_true)
    else:
        n_loss, n_num = scalar_loss(z, z_true)
    return LossParts(total_loss(t_loss, n_loss, cfg), t_loss.item(), n_loss.item(), n_text, n_num)


# ---------------------------------------------------------------- optimiser


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    warm = max(1, int(math.ceil(cfg.warmup_ratio * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class AdamW:
    def __init__(self, params: gc.ParamStore, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
            if p.data.ndim >= 2 and self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data -= lr * update


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def batch_order(n: int, steps: int, batch_size: int, seed: int):
    """Deterministic epoch-shuffled batches of example indices."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > n:
            perm = rng.permutation(n)
            cursor = 0
        yield perm[cursor : cursor + min(batch_size, n)]
        cursor += batch_size


def train(
    model: SeqModel,
    dataset: Sequence[Example],
    opt_cfg: OptimConfig,
    loss_cfg: LossConfig,
    out_dir: str | Path | None = None,
    save_fn=None,
) -> TrainResult:
    if not dataset:
        raise ValueError("training set is empty")
    opt = AdamW(model.params, opt_cfg)
    result = TrainResult()
    initial = None
    bad = 0
    for step, idx in enumerate(batch_order(len(dataset), opt_cfg.steps, opt_cfg.batch_size, opt_cfg.seed)):
        batch = collate([dataset[i] for i in idx], model.vocab)
        model.params.zero_grad()
        parts = batch_loss(model, batch, loss_cfg)
        parts.total.backward()
        opt.step(lr_at(step, opt_cfg))
        total = parts.total.item()
        result.curve.append(
            {"step": step, "text_loss": parts.text, "num_loss": parts.num, "total": total}
        )
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if initial is None:
            initial = total
        bad = bad + 1 if total > opt_cfg.divergence_factor * initial else 0
        if bad >= opt_cfg.divergence_patience:
            raise TrainingDiverged(
                f"loss above {opt_cfg.divergence_factor}x initial ({initial:.4g}) "
                f"for {bad} steps, last {total:.4g} at step {step}"
            )
        if (
            out_dir is not None
            and save_fn is not None
            and opt_cfg.checkpoint_every
            and (step + 1) % opt_cfg.checkpoint_every == 0
        ):
            path = Path(out_dir) / f"checkpoint-{step + 1}.bin"
            save_fn(path)
            result.checkpoints.append(path)
        if step % 500 == 0:
            log.info("step %d total %.4f text %.4f num %.4f", step, total, parts.text, parts.num)
    return result


def write_curve(path: str | Path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "text_loss", "num_loss", "total"])
        w.writeheader()
        w.writerows(curve)


def smooth(values: Sequence[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
