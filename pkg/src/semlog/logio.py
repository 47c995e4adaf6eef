"""Reading, tokenizing, and serializing log corpora.

Raw logs are one message per line.  Annotated corpora are line-delimited
JSON records with token, category, and pair information.  Tokenization is
deterministic: whitespace split followed by peeling of edge punctuation,
so identifiers like ``attempt_14451444`` stay whole.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, TextIO

# Categories for annotated tokens.
CONCEPT = "C"
INSTANCE = "I"
NONE = "O"
CATEGORIES = (CONCEPT, INSTANCE, NONE)

# Edge punctuation peeled into single-character tokens.  '=' and internal
# separators are kept so "word=value" and "a.b.c:80" survive as one token.
PEEL_CHARS = frozenset("[](){},;:'\"")


class CorpusError(ValueError):
    """Raised when a corpus file or record violates the format."""


def tokenize(raw: str) -> list[str]:
    """Split a log line into tokens.

    Whitespace-delimited fragments are peeled of leading and trailing
    punctuation from PEEL_CHARS; each peeled character becomes its own
    token.  Characters are never merged across whitespace boundaries.
    """
    tokens: list[str] = []
    for fragment in raw.split():
        head: list[str] = []
        tail: list[str] = []
        while fragment and fragment[0] in PEEL_CHARS:
            head.append(fragment[0])
            fragment = fragment[1:]
        while fragment and fragment[-1] in PEEL_CHARS:
            tail.append(fragment[-1])
            fragment = fragment[:-1]
        tokens.extend(head)
        if fragment:
            tokens.append(fragment)
        tokens.extend(reversed(tail))
    return tokens


def strip_fields(line: str, drop: int = 0) -> str:
    """Remove the first `drop` whitespace-delimited header columns."""
    if drop < 0:
        raise CorpusError("drop count must be >= 0")
    if drop == 0:
        return line
    parts = line.split(None, drop)
    if len(parts) > drop:
        return parts[drop]
    if len(line.split()) < drop:
        raise CorpusError("header underflow")
    return ""


@dataclass(frozen=True)
class LogMessage:
    """A single log line and its token sequence."""

    raw: str
    tokens: tuple[str, ...]
    source_line: int = 1

    def __post_init__(self) -> None:
        if self.source_line < 1:
            raise CorpusError("source_line must be >= 1")
        if tuple(tokenize(self.raw)) != self.tokens:
            raise CorpusError("tokens do not match tokenize(raw)")

    @classmethod
    def from_raw(cls, raw: str, source_line: int = 1) -> "LogMessage":
        return cls(raw=raw, tokens=tuple(tokenize(raw)), source_line=source_line)


@dataclass(frozen=True)
class AnnotatedMessage:
    """A tokenized message with per-token categories and gold CI pairs."""

    message: LogMessage
    categories: tuple[str, ...]
    gold_pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        n = len(self.message.tokens)
        if len(self.categories) != n:
            raise CorpusError(
                "length mismatch: %d categories for %d tokens"
                % (len(self.categories), n)
            )
        for cat in self.categories:
            if cat not in CATEGORIES:
                raise CorpusError("unknown category %r" % (cat,))
        for c, i in self.gold_pairs:
            if not (0 <= c < n and 0 <= i < n):
                raise CorpusError("pair index out of range: (%d, %d)" % (c, i))
            if c == i:
                raise CorpusError("pair with identical indices: (%d, %d)" % (c, i))
            if self.categories[c] != CONCEPT:
                raise CorpusError("pair concept index %d is not a concept" % c)
            if self.categories[i] != INSTANCE:
                raise CorpusError("pair instance index %d is not an instance" % i)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.message.tokens


def _annotated_from_record(record: dict, line_no: int) -> AnnotatedMessage:
    for key in ("tokens", "categories", "pairs"):
        if key not in record:
            raise CorpusError("missing key %r at line %d" % (key, line_no))
    tokens = record["tokens"]
    categories = record["categories"]
    pairs = record["pairs"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusError("tokens must be a list of strings at line %d" % line_no)
    if len(categories) != len(tokens):
        raise CorpusError("length mismatch at line %d" % line_no)
    for p in pairs:
        if not (isinstance(p, list) and len(p) == 2):
            raise CorpusError("malformed pair at line %d" % line_no)
    raw = " ".join(tokens)
    message = LogMessage(raw=raw, tokens=tuple(tokens), source_line=line_no)
    try:
        return AnnotatedMessage(
            message=message,
            categories=tuple(categories),
            gold_pairs=tuple((int(c), int(i)) for c, i in pairs),
        )
    except CorpusError as exc:
        raise CorpusError("%s at line %d" % (exc, line_no)) from None


def read_annotations(path: str) -> list[AnnotatedMessage]:
    """Read an annotated corpus (one JSON record per line)."""
    out: list[AnnotatedMessage] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(
                    "malformed record at line %d: %s" % (line_no, exc)
                ) from None
            if not isinstance(record, dict):
                raise CorpusError("record at line %d is not an object" % line_no)
            out.append(_annotated_from_record(record, line_no))
    return out


def write_annotations(path: str, corpus: Iterable[AnnotatedMessage]) -> None:
    """Write an annotated corpus in the line-delimited JSON format."""
    with open(path, "w", encoding="utf-8") as fh:
        for annotated in corpus:
            _write_annotation_line(fh, annotated)


def _write_annotation_line(fh: TextIO, annotated: AnnotatedMessage) -> None:
    record = {
        "tokens": list(annotated.tokens),
        "categories": list(annotated.categories),
        "pairs": [[c, i] for c, i in annotated.gold_pairs],
    }
    fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_raw_messages(path: str, drop_columns: int = 0) -> list[LogMessage]:
    """Read a raw log file, one message per line, skipping blank lines."""
    out: list[LogMessage] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            content = strip_fields(line, drop_columns)
            out.append(LogMessage.from_raw(content, source_line=line_no))
    return out


def write_raw_messages(path: str, messages: Iterable[LogMessage]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for message in messages:
            fh.write(message.raw + "\n")
