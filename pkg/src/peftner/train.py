"""Losses, optimizer, schedules, the dynamic-masking collator, and the two
stage drivers (domain-adaptive MLM pre-training and task fine-tuning)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import evaluation, lora, textprep
from .autodiff import Tensor
from .corpus import LabeledSequence
from .encoder import (
    ClassifierHead,
    Encoder,
    MlmHead,
    classify_tokens,
    head_logits,
    make_classifier_head,
    mlm_logits,
)
from .textprep import IGNORE, N_RESERVED, Vocabulary

# named rng streams, so every stochastic consumer draws independently
_STREAM_SHUFFLE = 1
_STREAM_MASK = 2
_STREAM_DROPOUT = 3
_STREAM_INIT = 4
_STREAM_EVAL_MASK = 5


class AllIgnored(Exception):
    pass


class EmptyCorpus(Exception):
    pass


class EmptyDevSet(Exception):
    pass


@dataclass
class TrainPlan:
    """Hyperparameters for one training stage."""

    peak_lr: float
    batch_size: int
    epochs: int
    seed: int
    weight_decay: float = 0.0
    warmup_ratio: float | None = 0.1
    warmup_steps: int | None = None  # absolute steps; overrides the ratio
    patience: int = 3
    label_smoothing: float = 0.0
    grad_accum_steps: int = 1
    mask_rate: float = 0.15
    min_delta: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.grad_accum_steps < 1:
            raise ValueError("grad_accum_steps must be >= 1")

    def resolve_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            warmup = self.warmup_steps
        else:
            warmup = int(round((self.warmup_ratio or 0.0) * total_steps))
        return max(0, min(warmup, total_steps - 1))


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear 0 -> peak over the warmup, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup must end before total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- masking collator ----------------------------------------------------------


@dataclass
class MaskingOutcome:
    input_ids: list[np.ndarray]
    mlm_targets: list[np.ndarray]  # original id at selected positions, IGNORE elsewhere


def mask_batch(
    batch: Sequence[np.ndarray],
    vocab_size: int,
    rng: np.random.Generator,
    rate: float = 0.15,
) -> MaskingOutcome:
    """Dynamic MLM corruption: each non-special position is selected
    independently with probability `rate`; of the selected, 80% become MASK,
    10% a random vocabulary id, 10% stay unchanged."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    inputs: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for ids in batch:
        ids = np.asarray(ids, dtype=np.int64)
        corrupted = ids.copy()
        target = np.full(len(ids), IGNORE, dtype=np.int64)
        eligible = ids >= N_RESERVED
        selected = eligible & (rng.random(len(ids)) < rate)
        target[selected] = ids[selected]
        masked = selected & (rng.random(len(ids)) < 0.8)
        corrupted[masked] = textprep.MASK_ID
        randomized = selected & ~masked & (rng.random(len(ids)) < 0.5)
        corrupted[randomized] = rng.integers(0, vocab_size, size=len(ids))[randomized]
        inputs.append(corrupted)
        targets.append(target)
    return MaskingOutcome(inputs, targets)


# -- losses ----------------------------------------------------------------------


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, eps: float = 0.0) -> Tensor:
    """Mean over active rows of (1-eps) * (-log p_target) + eps * mean_c(-log p_c).

    Rows whose target is IGNORE are excluded. eps=0 reduces to cross-entropy.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    active = np.flatnonzero(targets != IGNORE)
    if active.size == 0:
        raise AllIgnored("no active rows: every target is IGNORE")
    n_classes = logits.shape[-1]
    logp = ad.log_softmax(ad.take_rows(logits, active))
    weights = np.full((active.size, n_classes), eps / n_classes)
    weights[np.arange(active.size), targets[active]] += 1.0 - eps
    return ad.scale(ad.tsum(ad.mul(logp, Tensor(weights))), -1.0 / active.size)


# -- optimizer --------------------------------------------------------------------


class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (_, t) in enumerate(self.params):
            g = t.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            # decoupled decay: applied to the parameter independently of the
            # adaptive step
            if self.weight_decay:
                t.data -= lr * self.weight_decay * t.data
            t.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- early stopping ------------------------------------------------------------


class EarlyStopper:
    """Stops after `patience` consecutive epochs without improving the best
    metric by more than `min_delta`."""

    def __init__(self, patience: int, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = -1
        self.failures = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch result; returns True when training should stop."""
        if value > self.best + self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.failures = 0
        else:
            self.failures += 1
        return self.failures >= self.patience


# -- perplexity -----------------------------------------------------------------


def perplexity(
    pieces: Sequence[np.ndarray],
    vocab_size: int,
    seed: int,
    logits_fn: Callable[[list[np.ndarray]], list[np.ndarray]],
    rate: float = 0.15,
    batch_size: int = 64,
) -> float:
    """exp(mean per-token NLL) over the masked positions of a fixed-seed
    masking pass. `logits_fn` maps a batch of corrupted id arrays to per-piece
    logit rows."""
    if len(pieces) == 0:
        raise EmptyCorpus("perplexity needs a nonempty corpus")
    rng = ad.make_rng(seed, _STREAM_EVAL_MASK)
    total_nll = 0.0
    total_count = 0
    for lo in range(0, len(pieces), batch_size):
        chunk = [np.asarray(p, dtype=np.int64) for p in pieces[lo : lo + batch_size]]
        outcome = mask_batch(chunk, vocab_size, rng, rate)
        logits = logits_fn(outcome.input_ids)
        for rows, target in zip(logits, outcome.mlm_targets):
            active = target != IGNORE
            if not active.any():
                continue
            sel = rows[active]
            shifted = sel - sel.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            total_nll += -logp[np.arange(len(sel)), target[active]].sum()
            total_count += len(sel)
    if total_count == 0:
        raise EmptyCorpus("masking selected no positions; corpus too small")
    return float(np.exp(total_nll / total_count))


# -- batched forward helpers -----------------------------------------------------


def _batch_mean_loss(
    model: Encoder,
    ids_list: list[np.ndarray],
    targets_list: list[np.ndarray],
    loss_head: Callable[[Tensor], Tensor],
    eps: float,
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor | None:
    """Mean over sequences of the per-sequence mean loss (sequences whose
    targets are all IGNORE drop out of the batch).

    The loss head runs only on active rows, which keeps the vocabulary-sized
    MLM projection off the untargeted positions.
    """
    keep = [i for i, t in enumerate(targets_list) if np.any(np.asarray(t) != IGNORE)]
    if not keep:
        return None
    ids_list = [ids_list[i] for i in keep]
    targets_list = [np.asarray(targets_list[i], dtype=np.int64) for i in keep]
    hidden, offsets = model.encode_batch(ids_list, train=train, rng=rng)
    gather: list[np.ndarray] = []
    compact_targets: list[np.ndarray] = []
    spans: list[tuple[int, int]] = []
    used = 0
    for targets, lo in zip(targets_list, offsets):
        active = np.flatnonzero(targets != IGNORE)
        gather.append(active + lo)
        compact_targets.append(targets[active])
        spans.append((used, used + len(active)))
        used += len(active)
    logits = loss_head(ad.take_rows(hidden, np.concatenate(gather)))
    total: Tensor | None = None
    for (s, e), targets in zip(spans, compact_targets):
        seq_loss = label_smoothed_ce(ad.row_slice(logits, s, e), targets, eps)
        total = seq_loss if total is None else ad.add(total, seq_loss)
    return ad.scale(total, 1.0 / len(spans))


def _run_epoch(
    model: Encoder,
    items: list[tuple[np.ndarray, np.ndarray]],
    loss_head: Callable[[Tensor], Tensor],
    optimizer: AdamW,
    plan: TrainPlan,
    epoch: int,
    total_steps: int,
    warmup: int,
    opt_step: int,
) -> tuple[float, int, float]:
    """One pass over pre-built (input_ids, targets) items; returns
    (mean loss, next opt step, last lr)."""
    order = ad.make_rng(plan.seed, _STREAM_SHUFFLE, epoch).permutation(len(items))
    drop_rng = ad.make_rng(plan.seed, _STREAM_DROPOUT, epoch)
    batches = [order[i : i + plan.batch_size] for i in range(0, len(order), plan.batch_size)]
    losses = []
    lr = 0.0
    accum = 0
    optimizer.zero_grad()
    for bi, batch_idx in enumerate(batches):
        ids = [items[i][0] for i in batch_idx]
        targets = [items[i][1] for i in batch_idx]
        loss = _batch_mean_loss(model, ids, targets, loss_head, plan.label_smoothing,
                                train=True, rng=drop_rng)
        if loss is None:
            continue
        losses.append(loss.item())
        ad.backward(ad.scale(loss, 1.0 / plan.grad_accum_steps))
        accum += 1
        if accum == plan.grad_accum_steps or bi == len(batches) - 1:
            opt_step += 1
            lr = lr_at(min(opt_step, total_steps), total_steps, plan.peak_lr, warmup)
            optimizer.step(lr)
            optimizer.zero_grad()
            accum = 0
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return mean_loss, opt_step, lr


# -- DAPT driver -------------------------------------------------------------------


@dataclass
class DaptResult:
    model: Encoder  # backbone with trained adapters still attached
    adapter: lora.AdapterState
    ppl_before: float
    ppl_after: float
    epoch_log: list[dict] = field(default_factory=list)

    @property
    def reduction_percent(self) -> float:
        return evaluation.perplexity_reduction(self.ppl_before, self.ppl_after)


def train_dapt(
    model: Encoder,
    train_pieces: Sequence[np.ndarray],
    heldout_pieces: Sequence[np.ndarray],
    plan: TrainPlan,
    lora_config: lora.LoraConfig | None = None,
) -> DaptResult:
    """Masked-language-model adaptation of the backbone through LoRA adapters.

    The base weights stay frozen; only adapter factors train. Returns the
    adapter plus held-out perplexity before and after.
    """
    if len(train_pieces) == 0:
        raise EmptyCorpus("DAPT needs a nonempty corpus")
    lora_config = lora_config or lora.LoraConfig()
    lora.inject(model, lora_config, ad.make_rng(plan.seed, _STREAM_INIT))
    head = MlmHead.tied(model)
    vocab_size = model.config.vocab_size

    def eval_logits(batch: list[np.ndarray]) -> list[np.ndarray]:
        hidden, offsets = model.encode_batch(batch, train=False)
        rows = mlm_logits(hidden, head).data
        return [rows[lo : lo + len(ids)] for ids, lo in zip(batch, offsets)]

    def heldout_ppl() -> float:
        return perplexity(heldout_pieces, vocab_size, plan.seed, eval_logits, plan.mask_rate)

    ppl_before = heldout_ppl()

    optimizer = AdamW(model.trainable_parameters(), weight_decay=plan.weight_decay)
    batches_per_epoch = math.ceil(len(train_pieces) / plan.batch_size)
    total_steps = max(1, math.ceil(batches_per_epoch / plan.grad_accum_steps) * plan.epochs)
    warmup = plan.resolve_warmup(total_steps)

    def mlm_rows(hidden: Tensor) -> Tensor:
        return mlm_logits(hidden, head)

    epoch_log: list[dict] = []
    opt_step = 0
    for epoch in range(1, plan.epochs + 1):
        mask_rng = ad.make_rng(plan.seed, _STREAM_MASK, epoch)
        outcome = mask_batch(train_pieces, vocab_size, mask_rng, plan.mask_rate)
        items = list(zip(outcome.input_ids, outcome.mlm_targets))
        mean_loss, opt_step, lr = _run_epoch(
            model, items, mlm_rows, optimizer, plan, epoch, total_steps, warmup, opt_step
        )
        ppl = heldout_ppl()
        epoch_log.append({"epoch": epoch, "train_loss": mean_loss, "heldout_ppl": ppl, "lr": lr})

    ppl_after = epoch_log[-1]["heldout_ppl"] if epoch_log else ppl_before
    return DaptResult(model, lora.extract_adapter(model, lora_config), ppl_before, ppl_after, epoch_log)


# -- fine-tuning driver --------------------------------------------------------------


@dataclass
class FinetuneResult:
    adapter: lora.AdapterState
    head: ClassifierHead
    history: list[dict]
    best_epoch: int
    best_f1: float
    stopped_epoch: int


def _prepare_items(
    seqs: Sequence[LabeledSequence],
    vocab: Vocabulary,
    label_to_id: dict[str, int],
    max_len: int,
    overlap: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    items = []
    for seq in seqs:
        piece_ids, word_index, ppw = textprep.tokenize_words(seq.words, vocab)
        piece_labels = textprep.align_labels(seq.labels, ppw)
        target = np.array(
            [IGNORE if l == IGNORE else label_to_id[l] for l in piece_labels], dtype=np.int64
        )
        for chunk in textprep.chunk_sequence(piece_ids, max_len, overlap, word_index):
            lo = chunk.window_start
            items.append((chunk.piece_ids, target[lo : lo + len(chunk)]))
    return items


def predict_corpus(
    model: Encoder,
    head: ClassifierHead,
    sentences: Sequence[Sequence[str]],
    vocab: Vocabulary,
    max_len: int = 256,
    overlap: int = 50,
    batch_size: int = 64,
) -> list[list[str]]:
    """Predict word-level BIO labels: tokenize, window, classify, stitch,
    then read the label off each word's first piece."""
    tokenized = [textprep.tokenize_words(words, vocab) for words in sentences]
    jobs = []  # (sentence idx, chunk)
    for si, (piece_ids, word_index, _) in enumerate(tokenized):
        if len(piece_ids) == 0:
            continue
        for chunk in textprep.chunk_sequence(piece_ids, max_len, overlap, word_index):
            jobs.append((si, chunk))
    chunk_preds: dict[int, list[tuple[int, np.ndarray]]] = {}
    for lo in range(0, len(jobs), batch_size):
        batch = jobs[lo : lo + batch_size]
        hidden, offsets = model.encode_batch([c.piece_ids for _, c in batch], train=False)
        probs = classify_tokens(hidden, head).data
        for (si, chunk), off in zip(batch, offsets):
            pred_ids = probs[off : off + len(chunk)].argmax(axis=1)
            chunk_preds.setdefault(si, []).append((chunk.window_start, pred_ids))
    results: list[list[str]] = []
    for si, words in enumerate(sentences):
        labels = ["O"] * len(words)
        if si in chunk_preds:
            _, word_index, _ = tokenized[si]
            stitched = textprep.stitch_predictions(chunk_preds[si])
            for pos, wi in enumerate(word_index):
                if wi != textprep.NO_WORD:
                    labels[wi] = head.labels[stitched[pos]]
        results.append(labels)
    return results


def train_finetune(
    model: Encoder,
    train_seqs: Sequence[LabeledSequence],
    dev_seqs: Sequence[LabeledSequence],
    plan: TrainPlan,
    vocab: Vocabulary,
    labels: list[str],
    lora_config: lora.LoraConfig | None = None,
    max_len: int = 256,
    overlap: int = 50,
) -> FinetuneResult:
    """Token-classification fine-tuning with early stopping on dev micro-F1.

    Fresh adapters plus a new classification head train on a frozen backbone.
    Stops when `plan.patience` consecutive epochs fail to beat the best dev
    F1 by more than `plan.min_delta`; returns the best epoch's checkpoint.
    """
    if len(dev_seqs) == 0:
        raise EmptyDevSet("fine-tuning requires a dev set for early stopping")
    lora_config = lora_config or lora.LoraConfig()
    lora.inject(model, lora_config, ad.make_rng(plan.seed, _STREAM_INIT))
    head = make_classifier_head(
        model.config.d_model, labels, ad.make_rng(plan.seed, _STREAM_INIT, 1)
    )
    label_to_id = {l: i for i, l in enumerate(labels)}
    items = _prepare_items(train_seqs, vocab, label_to_id, max_len, overlap)
    dev_words = [s.words for s in dev_seqs]

    params = model.trainable_parameters() + head.parameters()
    optimizer = AdamW(params, weight_decay=plan.weight_decay)
    batches_per_epoch = math.ceil(len(items) / plan.batch_size)
    total_steps = max(1, math.ceil(batches_per_epoch / plan.grad_accum_steps) * plan.epochs)
    warmup = plan.resolve_warmup(total_steps)

    def cls_rows(hidden: Tensor) -> Tensor:
        return head_logits(hidden, head)

    stopper = EarlyStopper(plan.patience, plan.min_delta)
    history: list[dict] = []
    best_snapshot = None
    opt_step = 0
    for epoch in range(1, plan.epochs + 1):
        mean_loss, opt_step, lr = _run_epoch(
            model, items, cls_rows, optimizer, plan, epoch, total_steps, warmup, opt_step
        )
        pred = predict_corpus(model, head, dev_words, vocab, max_len, overlap)
        report = evaluation.score_entities(dev_seqs, pred)
        dev_f1 = report.micro.f1
        history.append({"epoch": epoch, "train_loss": mean_loss, "dev_f1": dev_f1, "lr": lr})
        improved = dev_f1 > stopper.best + stopper.min_delta
        stop = stopper.update(epoch, dev_f1)
        if improved or best_snapshot is None:
            best_snapshot = (
                {k: (A.copy(), B.copy()) for k, (A, B) in
                 lora.extract_adapter(model, lora_config).matrices.items()},
                head.W_cls.data.copy(),
                head.b_cls.data.copy(),
            )
        if stop:
            break

    matrices, w_cls, b_cls = best_snapshot
    head.W_cls.data[...] = w_cls
    head.b_cls.data[...] = b_cls
    state = lora.AdapterState(lora_config, lora.fingerprint(model), matrices)
    lora.apply_adapter(model, state)
    return FinetuneResult(
        adapter=state,
        head=head,
        history=history,
        best_epoch=stopper.best_epoch,
        best_f1=stopper.best,
        stopped_epoch=history[-1]["epoch"] if history else 0,
    )
