"""Render per-class prompt templates, query a generator, strip label leakage."""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .embedding_store import CandidatePool, ConceptCandidate
from .errors import EmptyPool, GenerationError, ParseError, StubMissingError, TemplateError

logger = logging.getLogger(__name__)

PLACEHOLDER = "[CLASS NAME]"

DEFAULT_TEMPLATES = (
    "describe what a [CLASS NAME] looks like",
    "describe the aspects of a [CLASS NAME]",
    "describe [CLASS NAME] using sentences",
    "describe the patterns of a [CLASS NAME]",
    "describe the concepts of a [CLASS NAME]",
)

DEFAULT_INSTRUCTION = "Do not mention the class label itself in your answer."


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str
    id: int = 0

    def __post_init__(self):
        n = self.pattern.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(
                f"template {self.id} must contain {PLACEHOLDER!r} exactly once (found {n})"
            )

    def render(self, class_name):
        return self.pattern.replace(PLACEHOLDER, class_name)


def default_templates():
    return [PromptTemplate(p, i) for i, p in enumerate(DEFAULT_TEMPLATES, start=1)]


def render_prompts(templates, classes):
    """Return ``(class, prompt)`` pairs, class-major.

    ``classes`` may hold plain names or ``(label, display_name)`` pairs.
    """
    if not templates or not classes:
        raise TemplateError("need at least one template and one class")
    templates = [t if isinstance(t, PromptTemplate) else PromptTemplate(t, i)
                 for i, t in enumerate(templates, start=1)]
    out = []
    for cls in classes:
        label, name = cls if isinstance(cls, tuple) else (cls, cls)
        for t in templates:
            out.append((label, t.render(name)))
    return out


def leak_regex(class_names, extra_patterns=()):
    """Case-insensitive, word-bounded alternation over class names and plural forms."""
    alts = []
    for name in sorted({n for n in class_names if n.strip()}, key=len, reverse=True):
        words = [re.escape(w) for w in name.split()]
        alts.append(r"\s+".join(words) + "s?")
    alts.extend(extra_patterns)
    if not alts:
        return None
    return re.compile(r"(?<!\w)(?:" + "|".join(alts) + r")(?!\w)", re.IGNORECASE)


def filter_leakage(texts, class_names, extra_patterns=()):
    rx = leak_regex(class_names, extra_patterns)
    out = []
    for text in texts:
        cleaned = text if rx is None else rx.sub(" ", text)
        cleaned = re.sub(r"\s+", " ", cleaned).strip()
        cleaned = re.sub(r"\s+([.,;:!?])", r"\1", cleaned)
        if cleaned and re.search(r"\w", cleaned):
            out.append(cleaned)
    return out


# ---------------------------------------------------------------------------
# Generator clients
# ---------------------------------------------------------------------------

class StubClient:
    """Offline client serving texts from a JSON-lines file of
    ``{"class", "template_id", "text"}`` records."""

    kind = "file-stub"

    def __init__(self, path, samples_per_prompt=50, instruction=DEFAULT_INSTRUCTION):
        self.path = Path(path)
        self.samples_per_prompt = samples_per_prompt
        self.instruction = instruction
        if not self.path.is_file():
            raise StubMissingError(f"generator stub not found: {self.path}")
        self._texts = {}
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = (str(obj["class"]), int(obj["template_id"]))
                    text = str(obj["text"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise ParseError(f"{self.path}: bad stub record", lineno) from None
                self._texts.setdefault(key, []).append(text)

    def generate(self, label, template_id, prompt):
        return list(self._texts.get((str(label), int(template_id)), []))[: self.samples_per_prompt]


class HttpClient:
    """Minimal JSON chat-style endpoint client.

    Request body ``{"prompt", "n", "instruction"}``; response ``{"texts": [...]}``.
    """

    kind = "http"

    def __init__(self, url=None, token=None, samples_per_prompt=50,
                 instruction=DEFAULT_INSTRUCTION, retries=2, timeout=60.0, backoff=0.5):
        self.url = url or os.environ.get("CD_GEN_URL")
        self.token = token if token is not None else os.environ.get("CD_GEN_TOKEN")
        if not self.url:
            raise GenerationError("no generator URL (set CD_GEN_URL)", 0)
        self.samples_per_prompt = samples_per_prompt
        self.instruction = instruction
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    def generate(self, label, template_id, prompt):
        body = json.dumps({"prompt": prompt, "n": self.samples_per_prompt,
                           "instruction": self.instruction}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                texts = payload["texts"]
                if not isinstance(texts, list):
                    raise ValueError("'texts' is not a list")
                return [str(t) for t in texts]
            except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
                last = exc
                logger.warning("generation attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise GenerationError(f"generator request failed: {last}", self.retries)


def make_client(spec, base_dir="."):
    kind = spec.get("kind", "stub")
    n = spec.get("samples_per_prompt", 50)
    instr = spec.get("instruction", DEFAULT_INSTRUCTION)
    if kind in ("stub", "file-stub"):
        return StubClient(Path(base_dir) / spec["stub"], n, instr)
    if kind in ("http", "external"):
        return HttpClient(spec.get("url"), spec.get("token"), n, instr,
                          retries=spec.get("retries", 2))
    raise GenerationError(f"unknown generator kind {kind!r}", 0)


def generate_candidates(client, templates, classes, leak_terms=None, extra_patterns=(),
                        encoder=None, max_workers=4):
    """Query ``client`` for every (class, template) and build a filtered pool.

    ``classes`` holds ``(label, display_name)`` pairs or plain names. Leak terms
    default to every label and display name. Ids are ``<label>-<nnnn>`` numbered
    in (class, template, sample) order.
    """
    templates = [t if isinstance(t, PromptTemplate) else PromptTemplate(t, i)
                 for i, t in enumerate(templates, start=1)]
    pairs = [c if isinstance(c, tuple) else (c, c) for c in classes]
    if leak_terms is None:
        leak_terms = sorted({x for pair in pairs for x in pair})

    def run_class(pair):
        label, name = pair
        return [client.generate(label, t.id, t.render(name)) for t in templates]

    if getattr(client, "kind", "") == "http" and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            raw = list(ex.map(run_class, pairs))
    else:
        raw = [run_class(p) for p in pairs]

    candidates = []
    for (label, _), per_template in zip(pairs, raw):
        i = 0
        for texts in per_template:
            for text in filter_leakage(texts, leak_terms, extra_patterns):
                candidates.append(ConceptCandidate(f"{label}-{i:04d}", label, text))
                i += 1
    if not candidates:
        raise EmptyPool("generator produced no usable candidates")
    return CandidatePool.from_candidates([p[0] for p in pairs], candidates, encoder)
