"""``[phrase](target)`` inline annotation syntax."""

from __future__ import annotations

import re
from dataclasses import dataclass

TAG_RE = re.compile(r"\[([^\[\]]+)\]\(([^()\[\]]+)\)")


class MarkupError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    phrase: str
    target: str
    span: tuple[int, int]  # character offsets into the plain (de-tagged) text


@dataclass(frozen=True)
class TaggedReport:
    text: str
    annotations: tuple[Annotation, ...]

    @property
    def plain(self) -> str:
        return strip_markup(self.text)


def strip_markup(text: str) -> str:
    return TAG_RE.sub(lambda m: m.group(1), text)


def parse_markup(text: str) -> TaggedReport:
    """Parse tags, computing spans against the de-tagged text."""
    annotations = []
    plain_len = 0
    cursor = 0
    for m in TAG_RE.finditer(text):
        plain_len += m.start() - cursor
        phrase = m.group(1)
        annotations.append(Annotation(phrase, m.group(2), (plain_len, plain_len + len(phrase))))
        plain_len += len(phrase)
        cursor = m.end()
    return TaggedReport(text, tuple(annotations))


def render_markup(plain: str, annotations) -> str:
    out = []
    cursor = 0
    for a in sorted(annotations, key=lambda a: a.span):
        s, e = a.span
        if s < cursor:
            raise MarkupError("overlapping annotations")
        out.append(plain[cursor:s])
        out.append(f"[{plain[s:e]}]({a.target})")
        cursor = e
    out.append(plain[cursor:])
    return "".join(out)
