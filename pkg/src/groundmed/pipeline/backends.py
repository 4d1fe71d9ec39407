"""Text-completion backends and prompt templates.

A backend maps ``(system prompt, user text, few-shot pairs)`` to a completion.
:class:`MockBackend` reproduces each pipeline step with small auditable rules
so the whole pipeline runs offline and bytewise-reproducibly;
:class:`HttpBackend` talks to a chat-completion endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import urllib.error
import urllib.request
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

from ..errors import BackendError
from .markup import Annotation, parse_markup, render_markup
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("tag", "filter", "clean_mimic_step1", "clean_mimic_step2", "clean_ct")
ENV_ENDPOINT = "GROUNDMED_LLM_ENDPOINT"
ENV_MODEL = "GROUNDMED_LLM_MODEL"
ENV_API_KEY = "GROUNDMED_LLM_API_KEY"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(name)
    return resources.files("groundmed.pipeline").joinpath(f"prompts/{name}.txt").read_text()


@lru_cache(maxsize=None)
def load_fewshot(name: str) -> tuple[tuple[str, str], ...]:
    raw = resources.files("groundmed.pipeline").joinpath(f"prompts/fewshot_{name}.json").read_text()
    return tuple((a, b) for a, b in json.loads(raw))


def render_tag_prompt(taxonomy: Taxonomy) -> str:
    text = load_template("tag")
    text = text.replace("{'; '.join(anatomy_list)}", "; ".join(taxonomy.names("anatomy")))
    return text.replace("{'; '.join(anomaly_list)}", "; ".join(taxonomy.names("abnormality")))


def render_clean_prompt(name: str, section_text: str) -> str:
    return load_template(name).replace("{input}", section_text)


class AnnotatorBackend(Protocol):
    def complete(self, system: str, user: str, examples: Sequence[tuple[str, str]] = ()) -> str: ...


# --- deterministic mock ----------------------------------------------------

NEGATION_CUES = ("no", "without", "absent", "not", "free of", "unremarkable")
_CUE_RE = re.compile(r"\b(?:" + "|".join(re.escape(c) for c in NEGATION_CUES) + r")\b", re.IGNORECASE)
_CLAUSE_BREAK = re.compile(r"[,;.:?!]")
_SENTENCE_RE = re.compile(r"[^.!?]+[.!?]?")


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.findall(text) if s.strip()]


def _cap(s: str) -> str:
    return s[:1].upper() + s[1:]


_VIEW_META = re.compile(
    r"^(?:(?:portable|frontal|lateral|pa|ap)\s+)*(?:and\s+lateral\s+)?"
    r"(?:chest\s+radiograph|radiograph|views?\s+of\s+the\s+chest|images?\s+of\s+the\s+chest)\s+"
    r"(?:shows|demonstrates|reveals)\s+(.*?)\.$",
    re.IGNORECASE,
)
_COMPARISON_LEAD = re.compile(r"^(?:as\s+)?compared\s+(?:to|with)\s+(?:the\s+)?(?:prior|previous)[^,]*,\s*", re.IGNORECASE)
_INTERVAL_CHANGE = re.compile(
    r"^(?:the\s+)?(.+?)\s+(?:has|have)\s+(?:improved|worsened|increased|decreased)(?:\s+\w+)?\.$", re.IGNORECASE
)
_DROP_WORDS = re.compile(r"\b(?:unchanged|stable|history|previously|resolved)\b", re.IGNORECASE)
_NEW = re.compile(r"\bnew\s+", re.IGNORECASE)


def mock_clean_views(text: str) -> str:
    out = []
    for s in _sentences(text):
        m = _VIEW_META.match(s)
        out.append(_cap(m.group(1)) + " is seen." if m else s)
    return " ".join(out)


def mock_clean_priors(text: str) -> str:
    out = []
    for s in _sentences(text):
        s = _COMPARISON_LEAD.sub("", s)
        s = _NEW.sub("", s)
        if _DROP_WORDS.search(s):
            continue
        m = _INTERVAL_CHANGE.match(s)
        if m:
            s = f"There is {m.group(1).lower()}."
        out.append(_cap(s))
    return " ".join(out)


def mock_tag(text: str, taxonomy: Taxonomy) -> str:
    anns = [Annotation(text[s:e], target, (s, e)) for s, e, target in taxonomy.scan(text)]
    return render_markup(text, anns)


def mock_filter(tagged_text: str) -> str:
    """Drop every tag whose clause (delimited by , ; . : ? !) contains a negation cue."""
    report = parse_markup(tagged_text)
    plain = report.plain
    breaks = [m.start() for m in _CLAUSE_BREAK.finditer(plain)]
    keep = []
    for a in report.annotations:
        s, e = a.span
        lo = max([b + 1 for b in breaks if b < s], default=0)
        hi = min([b for b in breaks if b >= e], default=len(plain))
        if not _CUE_RE.search(plain[lo:hi]):
            keep.append(a)
    return render_markup(plain, keep)


class MockBackend:
    """Rule-based stand-in for the instruction-following LLM.

    The task is recognized from the prompt itself: the tag and filter system
    prompts, or one of the cleaning templates rendered into the user message.
    With ``identity=True`` every completion echoes its input text.
    """

    def __init__(self, taxonomy: Taxonomy | None = None, identity: bool = False):
        self.taxonomy = taxonomy or Taxonomy.load()
        self.identity = identity
        self._lock = threading.Lock()
        self.calls = 0
        self._tag_system = render_tag_prompt(self.taxonomy)
        self._filter_system = load_template("filter")
        self._clean_heads = {
            name: load_template(name).split("{input}")[0] for name in ("clean_mimic_step1", "clean_mimic_step2", "clean_ct")
        }

    def complete(self, system: str, user: str, examples: Sequence[tuple[str, str]] = ()) -> str:
        with self._lock:
            self.calls += 1
        if system == self._tag_system:
            return user if self.identity else mock_tag(user, self.taxonomy)
        if system == self._filter_system:
            return user if self.identity else mock_filter(user)
        for name, head in self._clean_heads.items():
            if user.startswith(head):
                tail = load_template(name).split("{input}")[1]
                text = user[len(head) : len(user) - len(tail)]
                if self.identity:
                    return text
                return mock_clean_views(text) if name == "clean_mimic_step1" else mock_clean_priors(text)
        raise BackendError("mock backend does not recognize the prompt")


# --- HTTP chat-completion backend -----------------------------------------


class HttpBackend:
    """Chat-completion-style client (``POST {endpoint}`` with a ``messages`` list).

    Endpoint, model and API key come from ``GROUNDMED_LLM_ENDPOINT``,
    ``GROUNDMED_LLM_MODEL`` and ``GROUNDMED_LLM_API_KEY`` unless passed in.
    """

    def __init__(self, endpoint: str | None = None, model: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0, debug: bool = False):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self.timeout = timeout
        self.debug = debug
        if not self.endpoint:
            raise BackendError(f"no endpoint configured; set {ENV_ENDPOINT}")

    def build_request(self, system: str, user: str, examples: Sequence[tuple[str, str]] = ()) -> dict:
        messages = [{"role": "system", "content": system}] if system else []
        for q, a in examples:
            messages.append({"role": "user", "content": q})
            messages.append({"role": "assistant", "content": a})
        messages.append({"role": "user", "content": user})
        return {"model": self.model, "messages": messages, "temperature": 0}

    def complete(self, system: str, user: str, examples: Sequence[tuple[str, str]] = ()) -> str:
        body = json.dumps(self.build_request(system, user, examples)).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        if self.debug:
            log.debug("request to %s: %s", self.endpoint, body.decode())
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read().decode()
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise BackendError(f"request to {self.endpoint} failed: {exc}") from exc
        if self.debug:
            log.debug("response: %s", raw)
        try:
            return json.loads(raw)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {raw[:200]}") from exc
