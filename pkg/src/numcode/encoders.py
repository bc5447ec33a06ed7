"""Numeric encoding strategies: number projector, xVal scaling, digit text."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from typing import Iterable

import numpy as np

from . import gradcore as gc

ENCODINGS = ("drivecode", "xval", "digits")
XVAL_CLAMP = 5.0
DIGIT_LIMIT = 1e9


class NonFiniteInput(ValueError):
    pass


class DigitParseError(ValueError):
    pass


@dataclass(frozen=True)
class Normalizer:
    """Affine scalar transform ``z = (x - offset) / scale``."""

    offset: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, values: Iterable[float]) -> "Normalizer":
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size == 0:
            return cls()
        std = float(arr.std())
        return cls(float(arr.mean()), std if std > 1e-12 else 1.0)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.scale

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.offset


def _check_finite(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"non-finite numeric input: {x!r}")
    return arr


class NumberProjector:
    """Two-layer GELU MLP lifting a normalised scalar into the hidden space."""

    def __init__(self, w1: gc.Tensor, b1: gc.Tensor, w2: gc.Tensor, b2: gc.Tensor,
                 normalizer: Normalizer):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.normalizer = normalizer

    @property
    def d(self) -> int:
        return self.w2.shape[1]

    def embed(self, z: gc.Tensor) -> gc.Tensor:
        """Embeddings ``[n, d]`` for already-normalised values ``z[n]``."""
        h = gc.gelu(gc.matmul(gc.reshape(z, (-1, 1)), self.w1) + self.b1)
        return gc.matmul(h, self.w2) + self.b2

    def embed_values(self, xs) -> gc.Tensor:
        xs = _check_finite(xs).reshape(-1)
        return self.embed(gc.Tensor(self.normalizer.normalize(xs)))


def project_number(p: NumberProjector, x: float) -> np.ndarray:
    """Embedding of a single number, shape ``[d]``."""
    return p.embed_values([x]).data[0]


class XValEncoder:
    """One shared embedding vector scaled by the (clamped) normalised value."""

    def __init__(self, table: gc.Tensor, num_id: int, normalizer: Normalizer):
        self.table = table
        self.num_id = num_id
        self.normalizer = normalizer

    @property
    def num_embedding(self) -> np.ndarray:
        return self.table.data[self.num_id]

    def scale_for(self, xs) -> np.ndarray:
        xs = _check_finite(xs).reshape(-1)
        return np.clip(self.normalizer.normalize(xs), -XVAL_CLAMP, XVAL_CLAMP)

    def embed_values(self, xs) -> gc.Tensor:
        s = self.scale_for(xs)
        rows = gc.embedding(self.table, np.full(s.shape[0], self.num_id))
        return gc.mul(rows, gc.Tensor(s[:, None]))


def xval_embed(e: XValEncoder, x: float) -> np.ndarray:
    return e.embed_values([x]).data[0]


@dataclass(frozen=True)
class DigitCodec:
    """Fixed-point text rendering; each character is one decoding step."""

    decimals: int = 2

    def format(self, x: float) -> str:
        x = float(_check_finite(x))
        if abs(x) >= DIGIT_LIMIT:
            raise ValueError(f"|x| must be < {DIGIT_LIMIT:g}, got {x}")
        q = Decimal(repr(x)).quantize(Decimal(1).scaleb(-self.decimals), rounding=ROUND_HALF_UP)
        if q == 0:
            q = abs(q)
        return f"{q:.{self.decimals}f}"

    def parse(self, text: str) -> float:
        body = text[1:] if text.startswith("-") else text
        head, dot, tail = body.partition(".")
        if (
            not head.isdigit()
            or not head.isascii()
            or (self.decimals and (dot != "." or len(tail) != self.decimals or not tail.isdigit()))
            or (not self.decimals and dot)
        ):
            raise DigitParseError(f"malformed digit string {text!r}")
        try:
            return float(Decimal(text))
        except InvalidOperation as exc:
            raise DigitParseError(f"malformed digit string {text!r}") from exc

    def round(self, x: float) -> float:
        return self.parse(self.format(x))


def digit_encode(c: DigitCodec, x: float, vocab) -> list[int]:
    return [vocab.stoi[ch] for ch in c.format(x)]


def digit_decode(c: DigitCodec, ids: Iterable[int], vocab) -> float:
    try:
        text = "".join(vocab.itos[i] for i in ids)
    except (IndexError, TypeError) as exc:
        raise DigitParseError(f"ids do not form a digit string: {ids!r}") from exc
    return c.parse(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (math.sqrt(a @ a) * math.sqrt(b @ b)))
