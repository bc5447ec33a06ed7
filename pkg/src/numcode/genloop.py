"""Greedy dual-head decoding and decoding-step accounting.

At every step the LM head picks the next token from the last hidden state.
If that token is ``<num>``, the number head regresses a value from the same
hidden state and the value's numeric embedding becomes the next input row;
otherwise the token's text embedding does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .encoders import DigitCodec
from .numtext import NUMBER_RE, CharVocab


class Decoder(Protocol):
    eos_id: int
    num_id: int
    vocab: CharVocab
    max_seq_len: int
    emits_numbers: bool

    def hidden_states(self, rows: np.ndarray) -> np.ndarray: ...
    def lm_logits(self, h: np.ndarray) -> np.ndarray: ...
    def regress_number(self, h: np.ndarray) -> float: ...
    def number_embedding(self, x: float) -> np.ndarray: ...
    def token_embedding(self, token: int) -> np.ndarray: ...


@dataclass
class GenerationResult:
    text: str
    numbers: list[float]
    step_count: int
    per_number_steps: int
    tokens: list[int]
    truncated: bool = False
    fed_embeddings: list[np.ndarray] = field(default_factory=list)


def count_digit_steps(rendered_number: str) -> int:
    """Decoding steps a character-level model spends on one rendered number."""
    return len(rendered_number)


def numeric_steps_in_text(text: str) -> int:
    return sum(count_digit_steps(m.group()) for m in NUMBER_RE.finditer(text))


def generate(
    model: Decoder,
    prompt: np.ndarray,
    max_steps: int,
    codec: DigitCodec = DigitCodec(2),
    record: bool = False,
) -> GenerationResult:
    """Greedy decode from prompt embeddings ``[L, d]``.

    With ``record`` set, every embedding appended to the input is kept in
    ``fed_embeddings`` (the row fed after the last token is not computed).
    """
    rows = [np.asarray(r, dtype=np.float64) for r in np.asarray(prompt)]
    if len(rows) + max_steps > model.max_seq_len:
        raise ValueError(
            f"prompt length {len(rows)} + max_steps {max_steps} exceeds {model.max_seq_len}"
        )
    tokens: list[int] = []
    numbers: list[float] = []
    fed: list[np.ndarray] = []
    truncated = True
    for _ in range(max_steps):
        h = model.hidden_states(np.stack(rows))[-1]
        token = int(np.argmax(model.lm_logits(h)))
        tokens.append(token)
        if token == model.eos_id:
            truncated = False
            break
        if token == model.num_id:
            x_hat = model.regress_number(h)
            numbers.append(x_hat)
            nxt = model.number_embedding(x_hat)
        else:
            nxt = model.token_embedding(token)
        rows.append(nxt)
        if record:
            fed.append(nxt)

    body = tokens[:-1] if tokens and tokens[-1] == model.eos_id else tokens
    text = model.vocab.decode(body, number_text=lambda k: codec.format(numbers[k]))
    # regressed numbers cost one step each; digits written as text cost one per char
    per_number = len(numbers) + numeric_steps_in_text(model.vocab.decode(body))
    return GenerationResult(
        text=text,
        numbers=numbers,
        step_count=len(tokens),
        per_number_steps=per_number,
        tokens=tokens,
        truncated=truncated,
        fed_embeddings=fed,
    )


class ScriptedChoices:
    """Wrap a decoder so the LM head follows a fixed token script.

    Hidden states, number regression and embeddings still come from the
    wrapped decoder, so the feedback path is exercised for real.
    """

    def __init__(self, inner: Decoder, script: Sequence[int], prompt_len: int):
        self.inner = inner
        self.script = list(script)
        self.prompt_len = prompt_len
        self._rows_seen = 0
        self.eos_id = inner.eos_id
        self.num_id = inner.num_id
        self.vocab = inner.vocab
        self.max_seq_len = inner.max_seq_len
        self.emits_numbers = inner.emits_numbers

    def hidden_states(self, rows: np.ndarray) -> np.ndarray:
        self._rows_seen = len(rows)
        return self.inner.hidden_states(rows)

    def lm_logits(self, h: np.ndarray) -> np.ndarray:
        k = self._rows_seen - self.prompt_len
        logits = np.full(len(self.vocab), -1e9)
        logits[self.script[k] if k < len(self.script) else self.eos_id] = 0.0
        return logits

    def regress_number(self, h: np.ndarray) -> float:
        return self.inner.regress_number(h)

    def number_embedding(self, x: float) -> np.ndarray:
        return self.inner.number_embedding(x)

    def token_embedding(self, token: int) -> np.ndarray:
        return self.inner.token_embedding(token)


class StubDecoder:
    """Parameter-free decoder for tests: hidden state is the mean input row,
    the number head returns scripted values, and embeddings are fixed
    functions of the token id or value."""

    def __init__(self, d: int, script: Sequence[int], values: Sequence[float],
                 vocab: CharVocab | None = None, max_seq_len: int = 256,
                 emits_numbers: bool = True):
        self.d = d
        self.vocab = vocab or CharVocab()
        self.eos_id = self.vocab.eos_id
        self.num_id = self.vocab.num_id
        self.max_seq_len = max_seq_len
        self.emits_numbers = emits_numbers
        self.script = list(script)
        self.values = list(values)
        self._calls = 0
        self._regressed = 0

    def hidden_states(self, rows: np.ndarray) -> np.ndarray:
        return np.cumsum(rows, axis=0) / np.arange(1, len(rows) + 1)[:, None]

    def lm_logits(self, h: np.ndarray) -> np.ndarray:
        tok = self.script[self._calls] if self._calls < len(self.script) else self.eos_id
        self._calls += 1
        out = np.zeros(len(self.vocab))
        out[tok] = 1.0
        return out

    def regress_number(self, h: np.ndarray) -> float:
        x = self.values[self._regressed]
        self._regressed += 1
        return x

    def number_embedding(self, x: float) -> np.ndarray:
        return np.full(self.d, x)

    def token_embedding(self, token: int) -> np.ndarray:
        return np.full(self.d, -float(token))
