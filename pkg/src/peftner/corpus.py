"""CoNLL corpus ingestion, the BIO label codec, and entity-span extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

_LABEL_RE = re.compile(r"^(O|[BI]-.+)$")


class CorpusError(Exception):
    pass


class MalformedLine(CorpusError):
    def __init__(self, line_no: int, line: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: expected 'token<sep>label', got {line!r}")


class InvalidLabel(CorpusError):
    def __init__(self, line_no: int, label: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: label {label!r} is not valid BIO syntax")


class OverlappingSpans(CorpusError):
    pass


class OutOfBounds(CorpusError):
    pass


@dataclass(frozen=True, order=True)
class EntitySpan:
    """A typed entity over the half-open word-index range [start, end)."""

    entity_type: str
    start: int
    end: int


@dataclass
class LabeledSequence:
    """A sentence as word tokens with one BIO label per word."""

    words: list[str]
    labels: list[str]

    def __post_init__(self):
        if len(self.words) != len(self.labels):
            raise CorpusError(
                f"words/labels length mismatch: {len(self.words)} vs {len(self.labels)}"
            )

    def __len__(self) -> int:
        return len(self.words)


def is_valid_label(label: str) -> bool:
    return _LABEL_RE.match(label) is not None


def parse_conll(text: str) -> list[LabeledSequence]:
    """Parse CoNLL text: one "token<TAB or space>label" per line, blank line between sentences.

    Raises MalformedLine when a nonblank line does not have exactly two
    fields, InvalidLabel when the label field fails BIO syntax. Labels are
    case-sensitive.
    """
    sequences: list[LabeledSequence] = []
    words: list[str] = []
    labels: list[str] = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            if words:
                sequences.append(LabeledSequence(words, labels))
                words, labels = [], []
            continue
        fields = line.split("\t") if "\t" in line else line.split(" ")
        fields = [f for f in fields if f != ""]
        if len(fields) != 2:
            raise MalformedLine(line_no, line)
        token, label = fields
        if not is_valid_label(label):
            raise InvalidLabel(line_no, label)
        words.append(token)
        labels.append(label)
    if words:
        sequences.append(LabeledSequence(words, labels))
    return sequences


def parse_tokens(text: str) -> list[list[str]]:
    """Parse unlabeled token text: whitespace-separated tokens per line, blank line between sentences.

    Accepts both one-token-per-line (label-less CoNLL) and one-sentence-per-line
    layouts.
    """
    sentences: list[list[str]] = []
    current: list[str] = []
    for line in text.split("\n"):
        toks = line.split()
        if not toks:
            if current:
                sentences.append(current)
                current = []
            continue
        if len(toks) == 1:
            current.append(toks[0])
        else:
            if current:
                sentences.append(current)
                current = []
            sentences.append(toks)
    if current:
        sentences.append(current)
    return sentences


def format_conll(sequences: Iterable[LabeledSequence]) -> str:
    """Render sequences as CoNLL text with TAB separators."""
    blocks = []
    for seq in sequences:
        blocks.append("\n".join(f"{w}\t{l}" for w, l in zip(seq.words, seq.labels)))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def read_conll(path: str | Path) -> list[LabeledSequence]:
    return parse_conll(Path(path).read_text(encoding="utf-8"))


def write_conll(path: str | Path, sequences: Iterable[LabeledSequence]) -> None:
    Path(path).write_text(format_conll(sequences), encoding="utf-8")


def decode_bio(labels: list[str]) -> list[EntitySpan]:
    """Extract maximal entity spans from a BIO label list.

    An entity ends at "O", at any "B-", or at "I-" of a different type. An
    "I-<T>" with no open <T> entity is repaired to "B-<T>" (lenient
    convention), so decoding never fails on syntactically valid input.
    """
    spans: list[EntitySpan] = []
    open_type: str | None = None
    open_start = 0
    for i, label in enumerate(labels):
        if label == "O":
            if open_type is not None:
                spans.append(EntitySpan(open_type, open_start, i))
                open_type = None
            continue
        prefix, etype = label.split("-", 1)
        if prefix == "I" and etype == open_type:
            continue
        # B-, or I- acting as a repaired B-: close whatever is open, start fresh
        if open_type is not None:
            spans.append(EntitySpan(open_type, open_start, i))
        open_type = etype
        open_start = i
    if open_type is not None:
        spans.append(EntitySpan(open_type, open_start, len(labels)))
    return spans


def encode_bio(spans: Iterable[EntitySpan], length: int) -> list[str]:
    """Render non-overlapping spans as a BIO label list of the given length."""
    labels = ["O"] * length
    occupied = [False] * length
    for span in spans:
        if not (0 <= span.start < span.end <= length):
            raise OutOfBounds(f"span {span} does not fit in length {length}")
        if any(occupied[span.start : span.end]):
            raise OverlappingSpans(f"span {span} intersects another span")
        for i in range(span.start, span.end):
            occupied[i] = True
            labels[i] = f"I-{span.entity_type}"
        labels[span.start] = f"B-{span.entity_type}"
    return labels


@dataclass(frozen=True)
class BioViolation:
    position: int
    label: str
    reason: str


def validate_bio(labels: list[str]) -> list[BioViolation]:
    """Report BIO syntax errors and orphan "I-" positions; empty list means clean."""
    violations: list[BioViolation] = []
    open_type: str | None = None
    for i, label in enumerate(labels):
        if not is_valid_label(label):
            violations.append(BioViolation(i, label, "bad syntax"))
            open_type = None
            continue
        if label == "O":
            open_type = None
            continue
        prefix, etype = label.split("-", 1)
        if prefix == "I" and etype != open_type:
            violations.append(BioViolation(i, label, "orphan I- label"))
        open_type = etype
    return violations


def label_inventory(sequences: Iterable[LabeledSequence]) -> list[str]:
    """Deterministic BIO label list for a corpus: "O" first, then B-/I- per sorted type."""
    types = sorted({l.split("-", 1)[1] for seq in sequences for l in seq.labels if l != "O"})
    labels = ["O"]
    for t in types:
        labels.append(f"B-{t}")
        labels.append(f"I-{t}")
    return labels
