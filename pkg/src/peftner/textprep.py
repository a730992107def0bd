"""Subword tokenization, word/piece label alignment, and sliding-window chunking."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK, CLS, SEP = "<pad>", "<unk>", "<mask>", "<cls>", "<sep>"
RESERVED = (PAD, UNK, MASK, CLS, SEP)
PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID = range(5)
N_RESERVED = len(RESERVED)

# sentinel for piece positions excluded from loss and evaluation
IGNORE = -100
# word_index_of_piece value for pieces that do not open a word
NO_WORD = -1


class CorpusEmpty(Exception):
    pass


class LengthMismatch(Exception):
    pass


class InvalidWindow(Exception):
    pass


class CoverageGap(Exception):
    pass


@dataclass
class Vocabulary:
    """Piece inventory with dense ids; ids 0..4 are the reserved specials."""

    pieces: list[str]
    piece_to_id: dict[str, int] = field(init=False, repr=False)
    max_piece_len: int = field(init=False, repr=False)

    def __post_init__(self):
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        if len(self.piece_to_id) != len(self.pieces):
            raise ValueError("duplicate pieces in vocabulary")
        if tuple(self.pieces[:N_RESERVED]) != RESERVED:
            raise ValueError(f"first {N_RESERVED} pieces must be {RESERVED}")
        self.max_piece_len = max(len(p) for p in self.pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def size(self) -> int:
        return len(self.pieces)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


def _iter_words(corpus: Iterable) -> Iterable[str]:
    for item in corpus:
        words = getattr(item, "words", item)
        for w in words:
            yield w


def build_vocab(corpus: Iterable, target_size: int) -> Vocabulary:
    """Greedy frequency-based piece inventory.

    All single characters are kept; the most frequent multi-character
    substrings fill the remaining budget up to target_size. Deterministic
    given corpus order (ties broken by first occurrence).
    """
    word_counts: dict[str, int] = {}
    for w in _iter_words(corpus):
        word_counts[w] = word_counts.get(w, 0) + 1
    if not word_counts:
        raise CorpusEmpty("cannot build a vocabulary from an empty corpus")

    chars: dict[str, None] = {}
    substrings: dict[str, int] = {}
    for word, count in word_counts.items():
        for c in word:
            chars.setdefault(c, None)
        n = len(word)
        for i in range(n):
            for j in range(i + 2, n + 1):
                sub = word[i:j]
                substrings[sub] = substrings.get(sub, 0) + count

    minimum = N_RESERVED + len(chars)
    if target_size < minimum:
        raise ValueError(
            f"target_size {target_size} below minimum {minimum} "
            f"(reserved + distinct characters)"
        )

    pieces = list(RESERVED) + list(chars)
    budget = target_size - len(pieces)
    first_seen = {s: rank for rank, s in enumerate(substrings)}
    ranked = sorted(substrings, key=lambda s: (-substrings[s], first_seen[s]))
    pieces.extend(ranked[:budget])
    return Vocabulary(pieces)


def tokenize_word(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first segmentation; unknown characters map to UNK."""
    ids: list[int] = []
    i, n = 0, len(word)
    while i < n:
        match = None
        for j in range(min(n, i + vocab.max_piece_len), i, -1):
            piece_id = vocab.piece_to_id.get(word[i:j])
            if piece_id is not None:
                match = (piece_id, j)
                break
        if match is None:
            ids.append(UNK_ID)
            i += 1
        else:
            ids.append(match[0])
            i = match[1]
    return ids


def tokenize_words(words: Sequence[str], vocab: Vocabulary):
    """Tokenize a sentence; returns (piece_ids, word_index_of_piece, pieces_per_word).

    word_index_of_piece holds the source word index for the first piece of
    each word and NO_WORD for continuations.
    """
    piece_ids: list[int] = []
    word_index: list[int] = []
    pieces_per_word: list[int] = []
    for wi, word in enumerate(words):
        ids = tokenize_word(word, vocab)
        if not ids:
            ids = [UNK_ID]  # keep one piece per word so every word stays addressable
        pieces_per_word.append(len(ids))
        piece_ids.extend(ids)
        word_index.append(wi)
        word_index.extend([NO_WORD] * (len(ids) - 1))
    return (
        np.asarray(piece_ids, dtype=np.int64),
        np.asarray(word_index, dtype=np.int64),
        pieces_per_word,
    )


def align_labels(labels: Sequence, pieces_per_word: Sequence[int]) -> list:
    """Expand word-level labels to piece level.

    The first piece of each word carries the word's label; continuation
    pieces carry IGNORE, which is excluded from loss and evaluation.
    """
    if len(labels) != len(pieces_per_word):
        raise LengthMismatch(
            f"{len(labels)} labels for {len(pieces_per_word)} words"
        )
    out: list = []
    for label, n_pieces in zip(labels, pieces_per_word):
        if n_pieces < 1:
            raise LengthMismatch("every word must contribute at least one piece")
        out.append(label)
        out.extend([IGNORE] * (n_pieces - 1))
    return out


@dataclass
class Chunk:
    """One sliding window over a piece sequence."""

    piece_ids: np.ndarray
    word_index_of_piece: np.ndarray
    window_start: int

    def __len__(self) -> int:
        return len(self.piece_ids)


def window_starts(n: int, max_len: int, overlap: int) -> list[int]:
    """Window start offsets: 0, stride, 2*stride, ...; the final window shifts
    left so it ends exactly at n."""
    if not 0 <= overlap < max_len:
        raise InvalidWindow(f"overlap {overlap} must satisfy 0 <= overlap < max_len {max_len}")
    if n <= max_len:
        return [0]
    stride = max_len - overlap
    starts = [0]
    while starts[-1] + max_len < n:
        starts.append(starts[-1] + stride)
    if starts[-1] + max_len > n:
        starts[-1] = n - max_len
    return starts


def chunk_sequence(
    piece_ids: np.ndarray,
    max_len: int = 256,
    overlap: int = 50,
    word_index: np.ndarray | None = None,
) -> list[Chunk]:
    """Split a piece sequence into overlapping windows covering [0, n)."""
    piece_ids = np.asarray(piece_ids, dtype=np.int64)
    n = len(piece_ids)
    if word_index is None:
        word_index = np.full(n, NO_WORD, dtype=np.int64)
    chunks = []
    for start in window_starts(n, max_len, overlap):
        stop = min(start + max_len, n)
        chunks.append(Chunk(piece_ids[start:stop], word_index[start:stop], start))
    return chunks


def stitch_predictions(chunks: Sequence[tuple[int, Sequence]]) -> list:
    """Reconcile overlapping window predictions into one full-sequence list.

    For a piece covered by several windows, the window in which the piece is
    farthest from its nearer edge wins; ties go to the earlier window.
    """
    ordered = sorted(enumerate(chunks), key=lambda item: (item[1][0], item[0]))
    total = max((start + len(preds) for _, (start, preds) in ordered), default=0)
    best_dist = [-1] * total
    out: list = [None] * total
    for _, (start, preds) in ordered:
        end = start + len(preds)
        for offset, pred in enumerate(preds):
            pos = start + offset
            dist = min(offset, end - 1 - pos)
            if dist > best_dist[pos]:
                best_dist[pos] = dist
                out[pos] = pred
    missing = [i for i, d in enumerate(best_dist) if d < 0]
    if missing:
        raise CoverageGap(f"no window covers piece index {missing[0]}")
    return out
