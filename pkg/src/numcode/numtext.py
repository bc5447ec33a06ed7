"""Number extraction, placeholder templates, character tokenizer and labels.

Numbers are pulled out of dialogue text into an ordered list and replaced by
``<number_token>``; the list order always matches the left-to-right order of
placeholders. Tokenization maps each placeholder to a negative sentinel id so
that input assembly can find it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

NUMBER_TOKEN = "<number_token>"
IMAGE_TOKEN = "<image>"
USER_TOKEN = "<user>"
ASSISTANT_TOKEN = "<assistant>"
SYSTEM_TOKEN = "<system>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
NUM_TOKEN = "<num>"

IGNORE_INDEX = -100
IMAGE_TOKEN_INDEX = -200
NUMBER_TOKEN_INDEX = -300

ROLE_MARKERS = {"system": SYSTEM_TOKEN, "user": USER_TOKEN, "assistant": ASSISTANT_TOKEN}

# optional '-', digits, optional '.' digits; no exponent, no grouping
NUMBER_RE = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?![\w.])")
# literals such as "10." that look numeric but are not accepted
_MALFORMED_RE = re.compile(r"(?<![\w.])-?\d+\.(?!\d)")
_SENTENCE_BREAK = re.compile(r"[.!?]\s|\n")


class AlignmentError(ValueError):
    """Placeholders and numbers are out of step."""


class PlaceholderCollisionError(ValueError):
    """Raw text already contains the placeholder string."""


@dataclass(frozen=True)
class NumberSpan:
    start: int
    end: int
    value: float
    original_literal: str


@dataclass(frozen=True)
class ConversionPolicy:
    """Which recognised numbers stay as text.

    A number is kept verbatim when one of ``keywords`` occurs in the
    ``window`` characters before it (without crossing a sentence break), or
    when its ordinal among all matches is listed in ``excluded_ordinals``.
    """

    name: str = "default"
    keywords: tuple[str, ...] = ()
    window: int = 32
    excluded_ordinals: frozenset[int] = frozenset()

    def keeps_textual(self, text: str, start: int, ordinal: int) -> bool:
        if ordinal in self.excluded_ordinals:
            return True
        if not self.keywords:
            return False
        context = text[max(0, start - self.window) : start]
        breaks = list(_SENTENCE_BREAK.finditer(context))
        if breaks:
            context = context[breaks[-1].end() :]
        context = context.lower()
        return any(k.lower() in context for k in self.keywords)


POLICIES = {
    "none": ConversionPolicy(name="none"),
    "default": ConversionPolicy(
        name="default",
        keywords=("video length", "camera views", "cameras", "frames"),
    ),
}


def get_policy(policy_id: str) -> ConversionPolicy:
    try:
        return POLICIES[policy_id]
    except KeyError:
        raise ValueError(f"unknown numbers policy {policy_id!r}") from None


@dataclass(frozen=True)
class EncodedDialogue:
    template: str
    numbers: tuple[float, ...]
    spans: tuple[NumberSpan, ...]
    role_tags: tuple[str, ...] = ()
    diagnostics: tuple[str, ...] = ()

    @property
    def n_placeholders(self) -> int:
        return self.template.count(NUMBER_TOKEN)


def extract_numbers(
    text: str, policy: ConversionPolicy, role_tags: tuple[str, ...] = ()
) -> EncodedDialogue:
    if NUMBER_TOKEN in text:
        raise PlaceholderCollisionError(
            f"input already contains {NUMBER_TOKEN!r} at offset {text.index(NUMBER_TOKEN)}"
        )
    diagnostics = [
        f"malformed numeric literal {m.group()!r} at {m.start()} left as text"
        for m in _MALFORMED_RE.finditer(text)
    ]
    pieces: list[str] = []
    numbers: list[float] = []
    spans: list[NumberSpan] = []
    cursor = 0
    for ordinal, m in enumerate(NUMBER_RE.finditer(text)):
        if policy.keeps_textual(text, m.start(), ordinal):
            continue
        literal = m.group()
        pieces.append(text[cursor : m.start()])
        pieces.append(NUMBER_TOKEN)
        numbers.append(float(literal))
        spans.append(NumberSpan(m.start(), m.end(), float(literal), literal))
        cursor = m.end()
    pieces.append(text[cursor:])
    return EncodedDialogue(
        template="".join(pieces),
        numbers=tuple(numbers),
        spans=tuple(spans),
        role_tags=role_tags,
        diagnostics=tuple(diagnostics),
    )


def literal_passthrough(dialogue: EncodedDialogue) -> Callable[[int, float], str]:
    """Formatter that reproduces each number's original literal."""
    literals = [s.original_literal for s in dialogue.spans]
    return lambda k, _x: literals[k]


def restore_numbers(
    dialogue: EncodedDialogue, fmt: Callable[[int, float], str] | None = None
) -> str:
    """Put numbers back into the template.

    ``fmt(k, x)`` renders the k-th number; the default reproduces the
    original literals, so extraction followed by restoration is lossless.
    """
    parts = dialogue.template.split(NUMBER_TOKEN)
    if len(parts) - 1 != len(dialogue.numbers):
        raise AlignmentError(
            f"{len(parts) - 1} placeholders but {len(dialogue.numbers)} numbers"
        )
    if fmt is None:
        if len(dialogue.spans) != len(dialogue.numbers):
            raise AlignmentError("literal passthrough needs one span per number")
        fmt = literal_passthrough(dialogue)
    out = [parts[0]]
    for k, (x, tail) in enumerate(zip(dialogue.numbers, parts[1:])):
        out.append(fmt(k, x))
        out.append(tail)
    return "".join(out)


# ---------------------------------------------------------------- dialogues


def render_turns(turns: Sequence[dict]) -> str:
    """Flatten ``[{"role", "text"}, ...]`` into one marked-up string."""
    chunks = []
    for turn in turns:
        role = turn["role"]
        if role not in ROLE_MARKERS:
            raise ValueError(f"unknown role {role!r}")
        chunks.append(f"{ROLE_MARKERS[role]}{turn['text']}{EOS_TOKEN}")
    return "".join(chunks)


def encode_turns(
    turns: Sequence[dict],
    policy: ConversionPolicy,
    convert_roles: Iterable[str] = ("system", "user", "assistant"),
) -> EncodedDialogue:
    """Extract numbers across a multi-turn dialogue into a single ordered list.

    Only turns whose role is in ``convert_roles`` have numbers converted;
    other turns stay verbatim. Span offsets refer to :func:`render_turns`.
    """
    convert_roles = set(convert_roles)
    template_parts: list[str] = []
    numbers: list[float] = []
    spans: list[NumberSpan] = []
    diagnostics: list[str] = []
    offset = 0
    for turn in turns:
        role = turn["role"]
        marker = ROLE_MARKERS.get(role)
        if marker is None:
            raise ValueError(f"unknown role {role!r}")
        text = turn["text"]
        if role in convert_roles:
            enc = extract_numbers(text, policy)
        else:
            if NUMBER_TOKEN in text:
                raise PlaceholderCollisionError(f"{role} turn already contains {NUMBER_TOKEN!r}")
            enc = EncodedDialogue(template=text, numbers=(), spans=())
        base = offset + len(marker)
        template_parts.append(marker + enc.template + EOS_TOKEN)
        numbers.extend(enc.numbers)
        spans.extend(
            NumberSpan(s.start + base, s.end + base, s.value, s.original_literal)
            for s in enc.spans
        )
        diagnostics.extend(enc.diagnostics)
        offset = base + len(text) + len(EOS_TOKEN)
    return EncodedDialogue(
        template="".join(template_parts),
        numbers=tuple(numbers),
        spans=tuple(spans),
        role_tags=tuple(t["role"] for t in turns),
        diagnostics=tuple(diagnostics),
    )


# ---------------------------------------------------------------- tokenizer


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    labels: tuple[int, ...]
    numeric_positions: tuple[int, ...]
    obs_positions: tuple[int, ...]
    diagnostics: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)


class CharVocab:
    """Character-level vocabulary: special markers, then printable ASCII.

    ``<number_token>`` and ``<image>`` never receive vocabulary ids; they map
    to the negative sentinels. ``<num>`` is the non-negative id the LM head
    predicts where a number should appear.
    """

    specials = (PAD_TOKEN, UNK_TOKEN, EOS_TOKEN, SYSTEM_TOKEN, USER_TOKEN, ASSISTANT_TOKEN, NUM_TOKEN)

    def __init__(self):
        chars = ["\n", "\t"] + [chr(c) for c in range(32, 127)]
        self.itos: list[str] = list(self.specials) + chars
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD_TOKEN]
        self.unk_id = self.stoi[UNK_TOKEN]
        self.eos_id = self.stoi[EOS_TOKEN]
        self.num_id = self.stoi[NUM_TOKEN]
        self.assistant_id = self.stoi[ASSISTANT_TOKEN]
        self.role_ids = {self.stoi[m]: r for r, m in ROLE_MARKERS.items()}
        self._marker_re = re.compile(
            "|".join(re.escape(m) for m in (NUMBER_TOKEN, IMAGE_TOKEN, *self.specials))
        )

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> tuple[list[int], list[str]]:
        ids: list[int] = []
        diagnostics: list[str] = []
        cursor = 0
        for m in self._marker_re.finditer(text):
            self._encode_chars(text[cursor : m.start()], cursor, ids, diagnostics)
            tok = m.group()
            if tok == NUMBER_TOKEN:
                ids.append(NUMBER_TOKEN_INDEX)
            elif tok == IMAGE_TOKEN:
                ids.append(IMAGE_TOKEN_INDEX)
            else:
                ids.append(self.stoi[tok])
            cursor = m.end()
        self._encode_chars(text[cursor:], cursor, ids, diagnostics)
        return ids, diagnostics

    def _encode_chars(self, chunk, base, ids, diagnostics):
        for i, ch in enumerate(chunk):
            idx = self.stoi.get(ch)
            if idx is None:
                diagnostics.append(f"unknown character {ch!r} at {base + i}")
                idx = self.unk_id
            ids.append(idx)

    def decode(self, ids: Iterable[int], number_text: Callable[[int], str] | None = None) -> str:
        out = []
        k = 0
        for i in ids:
            if i == NUMBER_TOKEN_INDEX or i == self.num_id:
                out.append(number_text(k) if number_text else NUMBER_TOKEN)
                k += 1
            elif i == IMAGE_TOKEN_INDEX:
                out.append(IMAGE_TOKEN)
            else:
                out.append(self.itos[i])
        return "".join(out)


def tokenize(dialogue: EncodedDialogue, vocab: CharVocab) -> TokenSequence:
    ids, diagnostics = vocab.encode(dialogue.template)
    return TokenSequence(
        ids=tuple(ids),
        labels=(IGNORE_INDEX,) * len(ids),
        numeric_positions=tuple(i for i, t in enumerate(ids) if t == NUMBER_TOKEN_INDEX),
        obs_positions=tuple(i for i, t in enumerate(ids) if t == IMAGE_TOKEN_INDEX),
        diagnostics=tuple(diagnostics),
    )


def assistant_mask(seq: TokenSequence, vocab: CharVocab) -> list[bool]:
    """True for tokens inside assistant turns (after the marker, through ``<eos>``)."""
    mask = []
    inside = False
    for t in seq.ids:
        if t in vocab.role_ids:
            inside = vocab.role_ids[t] == "assistant"
            mask.append(False)
            continue
        mask.append(inside)
        if t == vocab.eos_id:
            inside = False
    return mask


def build_labels(seq: TokenSequence, supervise: Sequence[bool]) -> TokenSequence:
    if len(supervise) != len(seq.ids):
        raise ValueError(f"role mask length {len(supervise)} != sequence length {len(seq.ids)}")
    labels = tuple(t if s else IGNORE_INDEX for t, s in zip(seq.ids, supervise))
    return TokenSequence(seq.ids, labels, seq.numeric_positions, seq.obs_positions, seq.diagnostics)
