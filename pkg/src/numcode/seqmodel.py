"""Compact causal transformer with text, number and observation inputs.

Input rows come from three sources: the text embedding table, the active
numeric encoder (at ``NUMBER_TOKEN_INDEX`` positions) and a one-layer
observation projector (at ``IMAGE_TOKEN_INDEX`` positions). The final hidden
state feeds both an LM head and a scalar number head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .encoders import ENCODINGS, NumberProjector, Normalizer, XValEncoder
from .numtext import IMAGE_TOKEN_INDEX, NUMBER_TOKEN_INDEX, CharVocab


class AlignmentError(ValueError):
    """Placeholder count does not match the supplied numbers/observations."""


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = len(CharVocab())
    max_seq_len: int = 256
    obs_dim: int = 4
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.d % 2:
            raise ValueError("d must be even (number head halves it)")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> gc.ParamStore:
    """Normal(0, init_std) matrices, zero biases, unit LayerNorm gains.

    The projector's first layer (a single input feature) is the exception.
    """
    p = gc.ParamStore()
    d, V, h = cfg.d, cfg.vocab_size, cfg.d // 2

    def mat(name, *shape):
        p.add(name, rng.normal(0.0, cfg.init_std, size=shape))

    def zeros(name, *shape):
        p.add(name, np.zeros(shape))

    def ln(prefix, n):
        p.add(f"{prefix}.gamma", np.ones(n))
        zeros(f"{prefix}.beta", n)

    mat("tok_emb", V, d)
    mat("obs_proj.w", cfg.obs_dim, d)
    zeros("obs_proj.b", d)
    # fan-in of one: unit std, otherwise the projected value starts ~1e-3 and never emerges
    p.add("num_proj.w1", rng.normal(0.0, 1.0, size=(1, d)))
    zeros("num_proj.b1", d)
    mat("num_proj.w2", d, d)
    zeros("num_proj.b2", d)
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        ln(f"{pre}.ln1", d)
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{pre}.attn.{w}", d, d)
            zeros(f"{pre}.attn.b{w[1]}", d)
        ln(f"{pre}.ln2", d)
        mat(f"{pre}.mlp.w1", d, cfg.mlp_ratio * d)
        zeros(f"{pre}.mlp.b1", cfg.mlp_ratio * d)
        mat(f"{pre}.mlp.w2", cfg.mlp_ratio * d, d)
        zeros(f"{pre}.mlp.b2", d)
    ln("ln_f", d)
    mat("lm_head.w", d, V)
    zeros("lm_head.b", V)
    mat("num_head.w1", d, h)
    zeros("num_head.b1", h)
    ln("num_head.ln", h)
    mat("num_head.w2", h, 1)
    zeros("num_head.b2", 1)
    return p


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Sine/cosine table scaled by ``1/sqrt(d)`` so rows have norm ~0.7,
    comparable to embedding rows instead of drowning them."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table / np.sqrt(d)


@dataclass
class AssembledInput:
    embeddings: gc.Tensor  # [B, L, d]
    numeric_positions: tuple[np.ndarray, np.ndarray]  # (batch idx, position)
    obs_positions: tuple[np.ndarray, np.ndarray]
    length: int


class NumberHead:
    """Linear d -> d/2, LayerNorm, GELU, linear d/2 -> 1."""

    def __init__(self, params: gc.ParamStore, normalizer: Normalizer):
        self.w1 = params["num_head.w1"]
        self.b1 = params["num_head.b1"]
        self.gamma = params["num_head.ln.gamma"]
        self.beta = params["num_head.ln.beta"]
        self.w2 = params["num_head.w2"]
        self.b2 = params["num_head.b2"]
        self.normalizer = normalizer

    def __call__(self, h: gc.Tensor) -> gc.Tensor:
        """Normalised predictions, one per leading index of ``h[..., d]``."""
        a = gc.matmul(h, self.w1) + self.b1
        a = gc.gelu(gc.layer_norm(a, self.gamma, self.beta))
        out = gc.matmul(a, self.w2) + self.b2
        return gc.reshape(out, out.shape[:-1])


def regress_number(head: NumberHead, h: np.ndarray) -> float:
    z = head(gc.Tensor(np.asarray(h, dtype=np.float64)[None, :])).data[0]
    return float(head.normalizer.denormalize(z))


class SeqModel:
    def __init__(self, cfg: ModelConfig, params: gc.ParamStore, normalizer: Normalizer,
                 encoding: str = "drivecode", vocab: CharVocab | None = None):
        if encoding not in ENCODINGS:
            raise ValueError(f"unknown encoding {encoding!r}")
        self.cfg = cfg
        self.params = params
        self.normalizer = normalizer
        self.encoding = encoding
        self.vocab = vocab or CharVocab()
        if len(self.vocab) != cfg.vocab_size:
            raise ValueError("vocabulary size does not match model config")
        self.projector = NumberProjector(
            params["num_proj.w1"], params["num_proj.b1"],
            params["num_proj.w2"], params["num_proj.b2"], normalizer,
        )
        self.xval = XValEncoder(params["tok_emb"], self.vocab.num_id, normalizer)
        self.head = NumberHead(params, normalizer)
        self._pos = sinusoidal_positions(cfg.max_seq_len, cfg.d)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, normalizer: Normalizer,
               encoding: str = "drivecode") -> "SeqModel":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)), normalizer, encoding)

    # -- properties used by the generation loop
    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    @property
    def num_id(self) -> int:
        return self.vocab.num_id

    @property
    def emits_numbers(self) -> bool:
        return self.encoding != "digits"

    @property
    def max_seq_len(self) -> int:
        return self.cfg.max_seq_len

    # -- embeddings
    def encode_numbers(self, xs) -> gc.Tensor:
        if self.encoding == "xval":
            return self.xval.embed_values(xs)
        return self.projector.embed_values(xs)

    def number_embedding(self, x: float) -> np.ndarray:
        return self.encode_numbers([x]).data[0]

    def token_embedding(self, token: int) -> np.ndarray:
        return self.params["tok_emb"].data[token].copy()

    def observation_embedding(self, obs) -> gc.Tensor:
        obs = gc.Tensor(np.asarray(obs, dtype=np.float64).reshape(-1, self.cfg.obs_dim))
        return gc.matmul(obs, self.params["obs_proj.w"]) + self.params["obs_proj.b"]

    # -- network
    def forward(self, inp: AssembledInput | gc.Tensor) -> gc.Tensor:
        x = inp.embeddings if isinstance(inp, AssembledInput) else inp
        B, L, d = x.shape
        if L > self.cfg.max_seq_len:
            raise SequenceTooLong(f"length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        p = self.params
        x = x + gc.Tensor(self._pos[:L])
        for i in range(self.cfg.n_layers):
            pre = f"blocks.{i}"
            a = gc.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
            q = gc.matmul(a, p[f"{pre}.attn.wq"]) + p[f"{pre}.attn.bq"]
            k = gc.matmul(a, p[f"{pre}.attn.wk"]) + p[f"{pre}.attn.bk"]
            v = gc.matmul(a, p[f"{pre}.attn.wv"]) + p[f"{pre}.attn.bv"]
            att = gc.causal_attention(q, k, v, self.cfg.n_heads)
            x = x + (gc.matmul(att, p[f"{pre}.attn.wo"]) + p[f"{pre}.attn.bo"])
            m = gc.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
            m = gc.gelu(gc.matmul(m, p[f"{pre}.mlp.w1"]) + p[f"{pre}.mlp.b1"])
            x = x + (gc.matmul(m, p[f"{pre}.mlp.w2"]) + p[f"{pre}.mlp.b2"])
        return gc.layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"])

    def logits(self, h: gc.Tensor) -> gc.Tensor:
        return gc.matmul(h, self.params["lm_head.w"]) + self.params["lm_head.b"]

    # -- numpy conveniences for decoding
    def hidden_states(self, rows: np.ndarray) -> np.ndarray:
        return self.forward(gc.Tensor(np.asarray(rows)[None])).data[0]

    def lm_logits(self, h: np.ndarray) -> np.ndarray:
        out = self.logits(gc.Tensor(np.asarray(h)[None])).data[0]
        if not self.emits_numbers:
            out = out.copy()
            out[self.num_id] = -np.inf
        return out

    def regress_number(self, h: np.ndarray) -> float:
        return regress_number(self.head, h)


def lm_logits(model: SeqModel, h: np.ndarray) -> np.ndarray:
    return model.lm_logits(h)


def assemble_batch(
    model: SeqModel,
    ids: np.ndarray,
    numbers: Sequence[Sequence[float]],
    obs: Sequence[np.ndarray] | None = None,
) -> AssembledInput:
    """Build ``H0`` for a padded batch ``ids[B, L]``.

    ``numbers[b]`` aligns with the number placeholders of row ``b`` in
    left-to-right order; ``obs[b]`` likewise with observation placeholders.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be [B, L]")
    B, L = ids.shape
    num_b, num_pos = np.nonzero(ids == NUMBER_TOKEN_INDEX)
    obs_b, obs_pos = np.nonzero(ids == IMAGE_TOKEN_INDEX)
    counts = np.bincount(num_b, minlength=B)
    for b in range(B):
        if counts[b] != len(numbers[b]):
            raise AlignmentError(
                f"row {b}: {counts[b]} number placeholders but {len(numbers[b])} numbers"
            )
    obs_counts = np.bincount(obs_b, minlength=B)
    if obs is None:
        obs = [np.zeros((0, model.cfg.obs_dim))] * B
    for b in range(B):
        n_obs = len(np.asarray(obs[b]).reshape(-1, model.cfg.obs_dim))
        if obs_counts[b] != n_obs:
            raise AlignmentError(
                f"row {b}: {obs_counts[b]} observation placeholders but {n_obs} vectors"
            )

    lookup = np.where(ids < 0, model.vocab.pad_id, ids)
    h0 = gc.embedding(model.params["tok_emb"], lookup)
    # np.nonzero is row-major, so rows come out in per-sequence placeholder order
    if num_b.size:
        flat = np.concatenate([np.asarray(n, dtype=np.float64) for n in numbers])
        h0 = gc.scatter_rows(h0, (num_b, num_pos), model.encode_numbers(flat))
    if obs_b.size:
        flat_obs = np.concatenate(
            [np.asarray(o, dtype=np.float64).reshape(-1, model.cfg.obs_dim) for o in obs]
        )
        h0 = gc.scatter_rows(h0, (obs_b, obs_pos), model.observation_embedding(flat_obs))
    return AssembledInput(h0, (num_b, num_pos), (obs_b, obs_pos), L)


def assemble_input(model: SeqModel, ids: Sequence[int], numbers: Sequence[float],
                   obs=None) -> AssembledInput:
    """Single-sequence form of :func:`assemble_batch`."""
    obs_list = None if obs is None else [np.asarray(obs, dtype=np.float64)]
    return assemble_batch(model, np.asarray([ids]), [list(numbers)], obs_list)
