"""Salient fact extraction: keyword scoring, domain patterns and entities.

Keyword scores use a YAKE-style quotient with these components, all
computed case-insensitively over the sentence-split corpus:

* ``TF``: raw occurrence count
* ``TS``: fraction of sentences containing the word
* ``TL``: ``min(len(word), 10) / 10``
* ``TP``: ``1 / (1 + index of the first sentence containing the word)``

and ``score = TF * TS / (TL * TP)``; higher means more important.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidInput, WordAbsent

KINDS = ("keyword", "endpoint", "rate_limit", "version", "numeric", "entity")
PATTERN_CONFIDENCE = 0.9
ENTITY_CONFIDENCE = 0.7

STOPWORDS = frozenset("""
a about above after again against all also am an and any are as at be because
been before being below between both but by can could did do does doing down
during each either else few for from further had has have having he her here
hers herself him himself his how however i if in into is it its itself just
may me might more most must my myself no nor not now of off on once only or
other our ours ourselves out over own same shall she should so some such than
that the their theirs them themselves then there these they this those through
to too under until up upon per very via was we were what when where which while who
whom why will with within without would yet you your yours yourself yourselves
""".split())

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+|\n\s*\n")
_WORD = re.compile(r"[A-Za-z][A-Za-z0-9_'-]*")


@dataclass(frozen=True)
class Fact:
    kind: str
    content: str
    confidence: float
    metadata: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown fact kind {self.kind!r}")
        if not self.content:
            raise InvalidInput("fact content must be non-empty")
        # confidences travel as float32; normalize up front so facts compare equal after transit
        conf = float(np.float32(self.confidence))
        if not 0.0 <= conf <= 1.0:
            raise InvalidInput(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "metadata", tuple((str(k), str(v)) for k, v in self.metadata))


# -- tokenization -------------------------------------------------------------

def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def tokenize(text: str) -> list[list[str]]:
    """Sentences of lowercase word tokens (empty sentences dropped).

    URLs and slash paths are skipped; they surface as endpoint facts instead.
    """
    out = []
    for sentence in split_sentences(text):
        words = [w.lower() for w in _WORD.findall(_LOCATOR.sub(" ", sentence))]
        if words:
            out.append(words)
    return out


# -- keywords -----------------------------------------------------------------

def yake_score(word: str, corpus: list[list[str]]) -> float:
    w = word.lower()
    if not corpus:
        raise EmptyInput("corpus has no sentences")
    tf = sum(s.count(w) for s in corpus)
    if tf == 0:
        raise WordAbsent(word)
    hits = [i for i, s in enumerate(corpus) if w in s]
    ts = len(hits) / len(corpus)
    tl = min(len(w), 10) / 10
    tp = 1.0 / (1 + hits[0])
    return tf * ts / (tl * tp)


def keyword_candidates(corpus: list[list[str]]) -> list[str]:
    seen = dict.fromkeys(w for s in corpus for w in s if len(w) >= 3 and w not in STOPWORDS)
    return list(seen)


def extract_keywords(text: str, top_k: int) -> list[Fact]:
    if not text or not text.strip():
        raise EmptyInput("text is empty")
    if top_k < 1:
        raise InvalidInput("top_k must be positive")
    corpus = tokenize(text)
    scored = [(yake_score(w, corpus), w) for w in keyword_candidates(corpus)]
    if not scored:
        return []
    scored.sort(key=lambda p: (-p[0], p[1]))
    best = scored[0][0]
    return [Fact("keyword", w, s / best, (("score", repr(s)),)) for s, w in scored[:top_k]]


# -- patterns -----------------------------------------------------------------

_METHODS = r"(?:GET|POST|PUT|PATCH|DELETE|HEAD|OPTIONS)"
_PATH = r"/[A-Za-z0-9_\-.{}:~/]*[A-Za-z0-9_\-{}~/]"
_PERIOD = r"(?:second|sec|s|minute|min|m|hour|hr|h|day|d|week|month)s?"
_UNITS = (r"(?:ms|us|ns|s|sec|secs|seconds?|minutes?|mins?|hours?|hrs?|days?|"
          r"b|kb|mb|gb|tb|kib|mib|gib|bytes?|bits?|%|px|hz|khz|mhz|ghz|"
          r"tokens?|requests?|calls?|items?|records?|retries|attempts?|connections?|threads?|x)")

# spans kept out of keyword tokens: URLs, slash paths and the HTTP method before a path
_LOCATOR = re.compile(rf"\b{_METHODS}\s+/\S+|\bhttps?://\S+|(?<![\w/])/\S+")

# (rule name, kind, regex); earlier rules win on overlapping spans
PATTERN_RULES: tuple[tuple[str, str, re.Pattern], ...] = (
    ("http_method_path", "endpoint", re.compile(rf"\b{_METHODS}\s+{_PATH}")),
    ("url", "endpoint", re.compile(r"\bhttps?://[^\s\"'<>)]+[^\s\"'<>).,;:]")),
    ("bare_path", "endpoint", re.compile(rf"(?<![\w/.]){_PATH}")),
    ("count_per_period", "rate_limit", re.compile(
        r"\b\d+(?:\.\d+)?\s*(?:requests?|calls?|req|queries|messages|tokens|operations|ops|hits)"
        rf"\s+(?:per|an?|each|every)\s+{_PERIOD}\b", re.IGNORECASE)),
    ("count_slash_period", "rate_limit", re.compile(
        rf"\b\d+(?:\.\d+)?\s*/\s*{_PERIOD}\b", re.IGNORECASE)),
    ("number_with_unit", "numeric", re.compile(
        rf"(?<![\w.])\d+(?:\.\d+)?\s?{_UNITS}(?![\w])", re.IGNORECASE)),
    ("version", "version", re.compile(r"(?<![\w.])v?\d+\.\d+(?:\.\d+)?(?![\w.]*\d)")),
)


def extract_patterns(text: str) -> list[Fact]:
    """Regex facts in order of appearance; each carries ``pattern=<rule>`` metadata."""
    taken: list[tuple[int, int]] = []
    found: list[tuple[int, Fact]] = []
    for rule, kind, rx in PATTERN_RULES:
        for m in rx.finditer(text):
            start, end = m.span()
            if any(start < e and s < end for s, e in taken):
                continue
            taken.append((start, end))
            found.append((start, Fact(kind, m.group(0), PATTERN_CONFIDENCE, (("pattern", rule),))))
    found.sort(key=lambda p: p[0])
    return [f for _, f in found]


def detect_content_type(text: str) -> str:
    """``"structured"`` for pattern-dense text such as API docs, else ``"general"``."""
    n_tokens = sum(len(s) for s in tokenize(text))
    n_patterns = len(extract_patterns(text))
    if n_patterns >= 3 or (n_patterns > 0 and n_patterns * 50 >= n_tokens):
        return "structured"
    return "general"


# -- entities -----------------------------------------------------------------

_CAP_TOKEN = re.compile(r"[A-Z][A-Za-z0-9&'-]*")
_ANY_TOKEN = re.compile(r"\S+")


def extract_entities(text: str) -> list[Fact]:
    """Runs of two or more capitalized tokens, not counting a sentence-initial one."""
    facts = []
    for sentence in split_sentences(text):
        runs: list[tuple[int, list[str]]] = []
        open_run = False
        for i, m in enumerate(_ANY_TOKEN.finditer(sentence)):
            raw = m.group(0)
            word = raw.strip("\"'()[]{}<>,;:.!?")
            if _CAP_TOKEN.fullmatch(word):
                # punctuation at a token edge closes the current run
                if not open_run or raw[0] in "(\"'":
                    runs.append((i, []))
                runs[-1][1].append(word)
                open_run = raw[-1] not in ",;:)\"'"
            else:
                open_run = False
        for start, words in runs:
            # a sentence-initial capital says nothing; drop it and keep the rest
            words = words[1:] if start == 0 else words
            if len(words) >= 2:
                facts.append(Fact("entity", " ".join(words), ENTITY_CONFIDENCE))
    return facts


# -- merge --------------------------------------------------------------------

def normalize(content: str) -> str:
    return " ".join(content.lower().split())


def merge_facts(groups: list[list[Fact]], budget: int) -> list[Fact]:
    """Deduplicate by normalized content (highest confidence kept), rank, truncate."""
    best: dict[str, Fact] = {}
    for group in groups:
        for f in group:
            key = normalize(f.content)
            if key not in best or f.confidence > best[key].confidence:
                best[key] = f
    ranked = sorted(best.values(), key=lambda f: (-f.confidence, f.content, f.kind))
    return ranked[:budget]


def extract_facts(text: str, budget: int) -> list[Fact]:
    if budget < 1:
        raise InvalidInput("budget must be positive")
    if not text or not text.strip():
        return []
    return merge_facts(
        [extract_patterns(text), extract_keywords(text, budget), extract_entities(text)],
        budget,
    )


def format_facts_summary(facts: list[Fact]) -> str:
    if not facts:
        return ""
    lines = [f"FACTS({len(facts)}):"]
    lines += [f"- [{f.kind}] {f.content}" for f in facts]
    return "\n".join(lines)
