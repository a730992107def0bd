"""Entity-level exact-match scoring, the approximate randomization test, and
perplexity-reduction reporting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeMismatch, make_rng
from .corpus import LabeledSequence, decode_bio


@dataclass
class ScoreRow:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalReport:
    per_type: dict[str, ScoreRow] = field(default_factory=dict)

    @property
    def micro(self) -> ScoreRow:
        return ScoreRow(
            tp=sum(r.tp for r in self.per_type.values()),
            fp=sum(r.fp for r in self.per_type.values()),
            fn=sum(r.fn for r in self.per_type.values()),
        )


def _labels_of(item) -> list[str]:
    return item.labels if isinstance(item, LabeledSequence) else list(item)


def sentence_counts(gold_labels: Sequence[str], pred_labels: Sequence[str]) -> dict[str, ScoreRow]:
    """Exact-match TP/FP/FN per entity type for one sentence.

    A predicted span counts as TP iff its type, start, and end all equal a
    gold span's; unmatched predictions are FP, unmatched gold are FN.
    """
    gold = set(decode_bio(list(gold_labels)))
    pred = set(decode_bio(list(pred_labels)))
    rows: dict[str, ScoreRow] = {}
    for span in gold | pred:
        row = rows.setdefault(span.entity_type, ScoreRow())
        if span in gold and span in pred:
            row.tp += 1
        elif span in pred:
            row.fp += 1
        else:
            row.fn += 1
    return rows


def score_entities(gold: Sequence, pred: Sequence) -> EvalReport:
    """Entity-level exact-match scoring over aligned sentence lists."""
    if len(gold) != len(pred):
        raise ShapeMismatch(f"gold has {len(gold)} sentences, pred has {len(pred)}")
    report = EvalReport()
    for i, (g, p) in enumerate(zip(gold, pred)):
        g_labels, p_labels = _labels_of(g), _labels_of(p)
        if len(g_labels) != len(p_labels):
            raise ShapeMismatch(
                f"sentence {i}: gold length {len(g_labels)} vs pred length {len(p_labels)}"
            )
        for etype, row in sentence_counts(g_labels, p_labels).items():
            agg = report.per_type.setdefault(etype, ScoreRow())
            agg.tp += row.tp
            agg.fp += row.fp
            agg.fn += row.fn
    return report


def micro_f1(gold: Sequence, pred: Sequence) -> float:
    return score_entities(gold, pred).micro.f1


def _micro_f1_from_counts(counts: np.ndarray) -> np.ndarray:
    """Vectorized micro-F1 for (..., 3) arrays of [tp, fp, fn]."""
    tp, fp, fn = counts[..., 0], counts[..., 1], counts[..., 2]
    denom_p = tp + fp
    denom_r = tp + fn
    p = np.divide(tp, denom_p, out=np.zeros_like(tp, dtype=float), where=denom_p > 0)
    r = np.divide(tp, denom_r, out=np.zeros_like(tp, dtype=float), where=denom_r > 0)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def approx_randomization_test(
    gold: Sequence,
    pred_a: Sequence,
    pred_b: Sequence,
    iterations: int = 10000,
    rng: np.random.Generator | None = None,
) -> float:
    """Two-sided approximate randomization test on |micro-F1(A) - micro-F1(B)|.

    Each iteration swaps the two systems' outputs per sentence with
    probability 1/2 and recomputes the statistic; the p-value uses +1
    smoothing so it always lies in (0, 1].
    """
    if rng is None:
        rng = make_rng(0)
    n = len(gold)
    counts_a = np.zeros((n, 3))
    counts_b = np.zeros((n, 3))
    for i, (g, a, b) in enumerate(zip(gold, pred_a, pred_b)):
        g_labels = _labels_of(g)
        for counts, p in ((counts_a, a), (counts_b, b)):
            for row in sentence_counts(g_labels, _labels_of(p)).values():
                counts[i] += (row.tp, row.fp, row.fn)
    base_a = counts_a.sum(axis=0)
    base_b = counts_b.sum(axis=0)
    diff = counts_b - counts_a
    observed = abs(
        float(_micro_f1_from_counts(base_a)) - float(_micro_f1_from_counts(base_b))
    )

    at_least = 0
    block = 2048
    for lo in range(0, iterations, block):
        m = min(block, iterations - lo)
        swaps = rng.random((m, n)) < 0.5
        delta = swaps @ diff  # (m, 3): count mass moved from B into A
        stats = np.abs(
            _micro_f1_from_counts(base_a + delta) - _micro_f1_from_counts(base_b - delta)
        )
        at_least += int(np.count_nonzero(stats >= observed))
    return (at_least + 1) / (iterations + 1)


def perplexity_reduction(base_ppl: float, adapted_ppl: float) -> float:
    """Percent reduction (1 - adapted/base) * 100; negative on regressions."""
    if base_ppl <= 0:
        raise ValueError("base perplexity must be positive")
    return (1.0 - adapted_ppl / base_ppl) * 100.0


def format_report(report: EvalReport) -> str:
    """Aligned plain-text table followed by a machine-readable key=value block."""
    rows = [("entity", "precision", "recall", "f1", "tp", "fp", "fn")]
    for etype in sorted(report.per_type):
        r = report.per_type[etype]
        rows.append((etype, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
                     str(r.tp), str(r.fp), str(r.fn)))
    m = report.micro
    rows.append(("micro", f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}",
                 str(m.tp), str(m.fp), str(m.fn)))
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    table = "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows

    )
    kv = [
        f"micro.precision={m.precision:.6f}",
        f"micro.recall={m.recall:.6f}",
        f"micro.f1={m.f1:.6f}",
        f"micro.tp={m.tp}",
        f"micro.fp={m.fp}",
        f"micro.fn={m.fn}",
    ]
    for etype in sorted(report.per_type):
        r = report.per_type[etype]
        kv.append(f"type.{etype}.precision={r.precision:.6f}")
        kv.append(f"type.{etype}.recall={r.recall:.6f}")
        kv.append(f"type.{etype}.f1={r.f1:.6f}")
        kv.append(f"type.{etype}.tp={r.tp}")
        kv.append(f"type.{etype}.fp={r.fp}")
        kv.append(f"type.{etype}.fn={r.fn}")
    return table + "\n\n" + "\n".join(kv) + "\n"
