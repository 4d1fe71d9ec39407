"""Bracket-token grounding protocol and the toy word-level tokenizer.

A grounded response encloses each phrase to localize in ``<p> ... </p>``; the
hidden state at the closing bracket prompts the localization decoder. An
instruction starts with ``<grd>`` or ``<ngrd>`` to switch grounding on or off.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

from .errors import MalformedResponseError, ProtocolError, SpanLayoutError


class Special(IntEnum):
    OPEN_P = 4
    CLOSE_P = 5
    GRD = 6
    NGRD = 7


SPECIAL_TEXT = {Special.OPEN_P: "<p>", Special.CLOSE_P: "</p>", Special.GRD: "<grd>", Special.NGRD: "<ngrd>"}
RESERVED = ["<pad>", "<unk>", "<bos>", "<eos>"] + [SPECIAL_TEXT[s] for s in Special]
PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_IDS = frozenset(int(s) for s in Special)

_TOKEN_RE = re.compile(r"<\/?p>|<n?grd>|[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
_NO_SPACE_BEFORE = set(".,;:?!)%")
_NO_SPACE_AFTER = set("(")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_words(words: Iterable[str]) -> str:
    out: list[str] = []
    for w in words:
        if out and w not in _NO_SPACE_BEFORE and out[-1] not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(w)
    return "".join(out)


class Tokenizer:
    """Closed-vocabulary whitespace/punctuation tokenizer.

    Ids 0-7 are reserved (pad, unk, bos, eos and the four grounding specials);
    base words follow in sorted order so the mapping is a pure function of the
    word set.
    """

    def __init__(self, words: Iterable[str]):
        base = sorted(set(words) - set(RESERVED))
        self.itos = RESERVED + base
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def special_ids(self) -> dict[str, int]:
        return {s.name: int(s) for s in Special}

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return join_words(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))

    def roundtrips(self, text: str) -> bool:
        return self.decode(self.encode(text)) == text

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words: set[str] = set()
        for t in texts:
            words.update(split_words(t))
        return cls(words)


@dataclass(frozen=True)
class GroundedSpan:
    phrase: str
    token_range: tuple[int, int]
    close_index: int


@dataclass(frozen=True)
class GroundedResponse:
    text: str
    spans: tuple[GroundedSpan, ...]


def insert_mode_token(tokens: Sequence[int], grounding_enabled: bool) -> list[int]:
    if not tokens:
        raise ProtocolError("instruction is empty")
    want = Special.GRD if grounding_enabled else Special.NGRD
    other = Special.NGRD if grounding_enabled else Special.GRD
    if tokens[0] == want:
        return list(tokens)
    if tokens[0] == other:
        raise ProtocolError(f"instruction already carries conflicting mode token {SPECIAL_TEXT[other]}")
    return [int(want)] + list(tokens)


def strip_tags(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t not in SPECIAL_IDS]


def render_grounded(text_tokens: Sequence[int], spans: Sequence[tuple[int, int]]) -> list[int]:
    """Wrap each ``[start, end)`` range of plain tokens in ``<p> ... </p>``."""
    prev_end = 0
    for start, end in spans:
        if not (0 <= start < end <= len(text_tokens)):
            raise SpanLayoutError(f"span ({start}, {end}) out of bounds or empty")
        if start < prev_end:
            raise SpanLayoutError(f"span ({start}, {end}) overlaps its predecessor")
        prev_end = end
    out: list[int] = []
    cursor = 0
    for start, end in spans:
        out.extend(text_tokens[cursor:start])
        out.append(int(Special.OPEN_P))
        out.extend(text_tokens[start:end])
        out.append(int(Special.CLOSE_P))
        cursor = end
    out.extend(text_tokens[cursor:])
    return out


def parse_response(tokens: Sequence[int], tokenizer: Tokenizer) -> GroundedResponse:
    """Extract bracketed spans; unbalanced or nested brackets raise :class:`MalformedResponseError`."""
    spans = []
    open_at = None
    for i, t in enumerate(tokens):
        if t == Special.OPEN_P:
            if open_at is not None:
                raise MalformedResponseError("nested <p>", i, tokenizer.decode(strip_tags(tokens)))
            open_at = i
        elif t == Special.CLOSE_P:
            if open_at is None:
                raise MalformedResponseError("</p> without matching <p>", i, tokenizer.decode(strip_tags(tokens)))
            if i == open_at + 1:
                raise MalformedResponseError("empty grounded phrase", i, tokenizer.decode(strip_tags(tokens)))
            inner = tokens[open_at + 1 : i]
            if any(x in SPECIAL_IDS for x in inner):
                raise MalformedResponseError("mode token inside grounded phrase", i, tokenizer.decode(strip_tags(tokens)))
            spans.append(GroundedSpan(tokenizer.decode(inner), (open_at + 1, i), i))
            open_at = None
    if open_at is not None:
        raise MalformedResponseError("unclosed <p>", len(tokens), tokenizer.decode(strip_tags(tokens)))
    return GroundedResponse(tokenizer.decode(strip_tags(tokens)), tuple(spans))


def extract_prompt_embeddings(hidden_states, response: GroundedResponse, offset: int = 0) -> list:
    """Hidden vectors at each ``</p>``; ``offset`` is the response's start within ``hidden_states``."""
    out = []
    n = len(hidden_states)
    for span in response.spans:
        idx = offset + span.close_index
        if not 0 <= idx < n:
            raise ProtocolError(f"close index {idx} outside hidden states of length {n}")
        out.append(hidden_states[idx])
    return out


def count_brackets(tokens: Sequence[int]) -> int:
    return sum(1 for t in tokens if t in (Special.OPEN_P, Special.CLOSE_P))
