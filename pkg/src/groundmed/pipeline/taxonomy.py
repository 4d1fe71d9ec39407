from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

KINDS = ("anatomy", "abnormality")


@dataclass(frozen=True)
class TaxonomyEntry:
    canonical: str
    kind: str
    synonyms: tuple[str, ...]


class Taxonomy:
    """Canonical grounding targets with their surface synonyms.

    File format: one entry per line, tab-separated ``kind``, ``canonical`` and
    ``|``-separated synonyms; ``#`` lines are comments. The first comment line
    carries the version (``# taxonomy v1``).
    """

    def __init__(self, entries, version: str = "v1"):
        self.entries = tuple(entries)
        self.version = version
        self._by_name: dict[str, TaxonomyEntry] = {}
        self._by_synonym: dict[str, TaxonomyEntry] = {}
        for e in self.entries:
            if e.kind not in KINDS:
                raise ValueError(f"unknown target kind {e.kind!r} for {e.canonical!r}")
            if e.canonical in self._by_name:
                raise ValueError(f"duplicate canonical name {e.canonical!r}")
            self._by_name[e.canonical] = e
        for e in self.entries:
            for s in set(e.synonyms) | {e.canonical}:
                key = s.lower()
                owner = self._by_synonym.get(key)
                if owner is not None and owner is not e:
                    raise ValueError(f"synonym {s!r} maps to both {owner.canonical!r} and {e.canonical!r}")
                self._by_synonym[key] = e
        alternatives = sorted(self._by_synonym, key=lambda s: (-len(s), s))
        self._pattern = re.compile(r"\b(?:" + "|".join(re.escape(a) for a in alternatives) + r")\b", re.IGNORECASE)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self):
        return len(self.entries)

    def kind(self, canonical: str) -> str:
        return self._by_name[canonical].kind

    def names(self, kind: str) -> list[str]:
        return [e.canonical for e in self.entries if e.kind == kind]

    def lookup(self, surface: str) -> TaxonomyEntry | None:
        return self._by_synonym.get(surface.lower())

    def scan(self, text: str) -> list[tuple[int, int, str]]:
        """Leftmost-longest synonym matches as ``(start, end, canonical)``."""
        return [(m.start(), m.end(), self._by_synonym[m.group(0).lower()].canonical) for m in self._pattern.finditer(text)]

    @classmethod
    def parse(cls, text: str) -> "Taxonomy":
        entries = []
        version = "v1"
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*taxonomy\s+(v\d+)", line)
                if m:
                    version = m.group(1)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"taxonomy line {lineno}: expected 3 tab-separated fields")
            kind, canonical, syns = parts
            entries.append(TaxonomyEntry(canonical.strip(), kind.strip(), tuple(s.strip() for s in syns.split("|") if s.strip())))
        return cls(entries, version)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Taxonomy":
        if path is None:
            text = resources.files("groundmed.pipeline").joinpath("data/taxonomy.tsv").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)
