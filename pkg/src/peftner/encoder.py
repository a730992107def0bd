"""Transformer encoder backbone with standard or disentangled attention,
plus the MLM head and the token-classification head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"PNBK"
CHECKPOINT_VERSION = 1

ATTENTION_MODES = ("standard", "disentangled")


class SequenceTooLong(Exception):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 256
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 1024
    max_positions: int = 512
    relative_position_buckets: int = 32  # k; the table holds 2k+1 buckets
    attention_mode: str = "standard"
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_positions < 256:
            raise ValueError("max_positions must be at least 256 (the training window)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class Linear:
    """y = x W^T + b, optionally augmented by a low-rank adapter path."""

    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias
        self.adapter = None  # set by lora.inject

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            y = ad.add(y, self.bias)
        a = self.adapter
        if a is not None:
            z = x
            if train and a.dropout > 0.0:
                z = ad.dropout(z, a.dropout, rng)
            low = ad.matmul(z, ad.transpose(a.A))
            up = ad.matmul(low, ad.transpose(a.B))
            y = ad.add(y, ad.scale(up, a.alpha / a.rank))
        return y


class EncoderLayer:
    def __init__(self, make_weight, make_bias, cfg: EncoderConfig):
        d, dff = cfg.d_model, cfg.d_ff
        self.query = Linear(make_weight((d, d)), make_bias(d))
        self.key = Linear(make_weight((d, d)), make_bias(d))
        self.value = Linear(make_weight((d, d)), make_bias(d))
        self.output = Linear(make_weight((d, d)), make_bias(d))
        self.ln_attn_gamma = Tensor(np.ones(d), requires_grad=True)
        self.ln_attn_beta = Tensor(np.zeros(d), requires_grad=True)
        self.ffn_w1 = Linear(make_weight((dff, d)), make_bias(dff))
        self.ffn_w2 = Linear(make_weight((d, dff)), make_bias(d))
        self.ln_ffn_gamma = Tensor(np.ones(d), requires_grad=True)
        self.ln_ffn_beta = Tensor(np.zeros(d), requires_grad=True)
        self.rel_embed: Tensor | None = None
        if cfg.attention_mode == "disentangled":
            table = 2 * cfg.relative_position_buckets + 1
            self.rel_embed = make_weight((table, cfg.d_model))

    @property
    def projections(self) -> dict[str, Linear]:
        return {"query": self.query, "key": self.key, "value": self.value, "output": self.output}


_BUCKET_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def relative_buckets(delta: np.ndarray, k: int, max_positions: int) -> np.ndarray:
    """Log-symmetric bucketing of relative positions into [0, 2k], center k.

    Offsets up to k//2 get exact buckets; larger magnitudes share
    log-spaced buckets out to max_positions - 1.
    """
    a = np.abs(delta).astype(np.float64)
    lin = max(1, k // 2)
    bucket = np.minimum(a, k)
    if k > lin and max_positions - 1 > lin:
        log_scale = (k - lin) / math.log((max_positions - 1) / lin)
        stretched = lin + np.floor(np.log(np.maximum(a, 1.0) / lin) * log_scale)
        bucket = np.where(a > lin, np.minimum(stretched, k), bucket)
    return (k + np.sign(delta) * bucket).astype(np.int64)


def _bucket_matrix(n: int, k: int, max_positions: int) -> np.ndarray:
    key = (n, k, max_positions)
    cached = _BUCKET_CACHE.get(key)
    if cached is None:
        pos = np.arange(n)
        cached = relative_buckets(pos[None, :] - pos[:, None], k, max_positions)
        _BUCKET_CACHE[key] = cached
    return cached


class Encoder:
    """Parameters plus a forward pass; a fresh graph is built per call."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config

        def make_weight(shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        def make_bias(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.tok_embed = make_weight((config.vocab_size, config.d_model))
        self.pos_embed = None
        if config.attention_mode == "standard":
            self.pos_embed = make_weight((config.max_positions, config.d_model))
        self.emb_ln_gamma = Tensor(np.ones(config.d_model), requires_grad=True)
        self.emb_ln_beta = Tensor(np.zeros(config.d_model), requires_grad=True)
        self.layers = [EncoderLayer(make_weight, make_bias, config) for _ in range(config.n_layers)]

    # -- parameter registry -------------------------------------------------

    def base_parameters(self) -> list[tuple[str, Tensor]]:
        """Backbone parameters in declared (checkpoint) order; adapters excluded."""
        params: list[tuple[str, Tensor]] = [("tok_embed", self.tok_embed)]
        if self.pos_embed is not None:
            params.append(("pos_embed", self.pos_embed))
        params.append(("emb_ln.gamma", self.emb_ln_gamma))
        params.append(("emb_ln.beta", self.emb_ln_beta))
        for i, layer in enumerate(self.layers):
            for pname, lin in layer.projections.items():
                params.append((f"layer{i}.attn.{pname}.weight", lin.weight))
                params.append((f"layer{i}.attn.{pname}.bias", lin.bias))
            params.append((f"layer{i}.ln_attn.gamma", layer.ln_attn_gamma))
            params.append((f"layer{i}.ln_attn.beta", layer.ln_attn_beta))
            params.append((f"layer{i}.ffn.w1.weight", layer.ffn_w1.weight))
            params.append((f"layer{i}.ffn.w1.bias", layer.ffn_w1.bias))
            params.append((f"layer{i}.ffn.w2.weight", layer.ffn_w2.weight))
            params.append((f"layer{i}.ffn.w2.bias", layer.ffn_w2.bias))
            params.append((f"layer{i}.ln_ffn.gamma", layer.ln_ffn_gamma))
            params.append((f"layer{i}.ln_ffn.beta", layer.ln_ffn_beta))
            if layer.rel_embed is not None:
                params.append((f"layer{i}.rel_embed", layer.rel_embed))
        return params

    def adapter_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.layers):
            for pname, lin in layer.projections.items():
                if lin.adapter is not None:
                    params.append((f"layer{i}.attn.{pname}.lora_A", lin.adapter.A))
                    params.append((f"layer{i}.attn.{pname}.lora_B", lin.adapter.B))
        return params

    def all_parameters(self) -> list[tuple[str, Tensor]]:
        return self.base_parameters() + self.adapter_parameters()

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.all_parameters() if p.requires_grad]

    def clone(self) -> "Encoder":
        """Deep copy of the backbone (adapters are not carried over)."""
        other = Encoder(self.config, ad.make_rng(0))
        for (_, src), (_, dst) in zip(self.base_parameters(), other.base_parameters()):
            dst.data[...] = src.data
            dst.requires_grad = src.requires_grad
            if not src.requires_grad:
                dst.grad = None
        return other

    # -- forward -------------------------------------------------------------

    def encode(
        self,
        piece_ids: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        hidden, _ = self.encode_batch([piece_ids], train=train, rng=rng, trace=trace)
        return hidden

    def encode_batch(
        self,
        ids_list: list[np.ndarray],
        train: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> tuple[Tensor, list[int]]:
        """Encode several sequences in one fused pass.

        Returns the row-concatenated hidden states and the row offset of each
        sequence. Attention never crosses sequence boundaries.
        """
        cfg = self.config
        lengths = [len(ids) for ids in ids_list]
        for n in lengths:
            if n > cfg.max_positions:
                raise SequenceTooLong(f"sequence of {n} pieces exceeds max_positions {cfg.max_positions}")
            if n == 0:
                raise ValueError("cannot encode an empty sequence")
        offsets = list(np.cumsum([0] + lengths[:-1]))
        ids = np.concatenate([np.asarray(a, dtype=np.int64) for a in ids_list])
        drop = cfg.dropout if train else 0.0

        x = ad.embedding_lookup(self.tok_embed, ids)
        if self.pos_embed is not None:
            pos = np.concatenate([np.arange(n) for n in lengths])
            x = ad.add(x, ad.embedding_lookup(self.pos_embed, pos))
        x = ad.layer_norm(x, self.emb_ln_gamma, self.emb_ln_beta)
        if drop > 0.0:
            x = ad.dropout(x, drop, rng)

        spans = list(zip(offsets, lengths))
        for li, layer in enumerate(self.layers):
            attn = self._attention(layer, x, spans, train, rng, trace, li)
            if drop > 0.0:
                attn = ad.dropout(attn, drop, rng)
            x = ad.layer_norm(ad.add(x, attn), layer.ln_attn_gamma, layer.ln_attn_beta)
            h = layer.ffn_w2(ad.gelu(layer.ffn_w1(x, train, rng)), train, rng)
            if drop > 0.0:
                h = ad.dropout(h, drop, rng)
            x = ad.layer_norm(ad.add(x, h), layer.ln_ffn_gamma, layer.ln_ffn_beta)
        return x, offsets

    def _attention(self, layer, x, spans, train, rng, trace, layer_idx):
        cfg = self.config
        H, dh = cfg.n_heads, cfg.d_head
        drop = cfg.dropout if train else 0.0
        q_all = layer.query(x, train, rng)
        k_all = layer.key(x, train, rng)
        v_all = layer.value(x, train, rng)

        rel_k = rel_q = None
        if cfg.attention_mode == "disentangled":
            rel_k = _split_heads(layer.key(layer.rel_embed, train, rng), H, dh)
            rel_q = _split_heads(layer.query(layer.rel_embed, train, rng), H, dh)

        contexts = []
        for si, (lo, n) in enumerate(spans):
            qh = _split_heads(ad.row_slice(q_all, lo, lo + n), H, dh)
            kh = _split_heads(ad.row_slice(k_all, lo, lo + n), H, dh)
            vh = _split_heads(ad.row_slice(v_all, lo, lo + n), H, dh)
            scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1)))
            if cfg.attention_mode == "disentangled":
                idx = _bucket_matrix(n, cfg.relative_position_buckets, cfg.max_positions)
                c2p = ad.take_per_row(ad.matmul(qh, ad.transpose(rel_k, (0, 2, 1))), idx)
                p2c = ad.transpose(ad.take_per_row(ad.matmul(kh, ad.transpose(rel_q, (0, 2, 1))), idx), (0, 2, 1))
                scores = ad.add(ad.add(scores, c2p), p2c)
                scores = ad.scale(scores, 1.0 / math.sqrt(3.0 * dh))
            else:
                scores = ad.scale(scores, 1.0 / math.sqrt(dh))
            probs = ad.softmax(scores)
            if trace is not None:
                trace.setdefault("attn_scores", {})[(layer_idx, si)] = scores.data.copy()
                trace.setdefault("attn_probs", {})[(layer_idx, si)] = probs.data.copy()
            if drop > 0.0:
                probs = ad.dropout(probs, drop, rng)
            ctx = ad.matmul(probs, vh)
            contexts.append(ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, cfg.d_model)))
        merged = contexts[0] if len(contexts) == 1 else ad.concat_rows(contexts)
        return layer.output(merged, train, rng)


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    n = x.shape[0]
    return ad.transpose(ad.reshape(x, (n, n_heads, d_head)), (1, 0, 2))


# -- heads --------------------------------------------------------------------


@dataclass
class ClassifierHead:
    """Single linear layer mapping hidden states to BIO label logits."""

    W_cls: Tensor  # (d_model, n_labels)
    b_cls: Tensor  # (n_labels,)
    labels: list[str]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.W_cls", self.W_cls), ("head.b_cls", self.b_cls)]


def make_classifier_head(d_model: int, labels: list[str], rng: np.random.Generator) -> ClassifierHead:
    W = Tensor(rng.normal(0.0, INIT_STD, size=(d_model, len(labels))), requires_grad=True)
    b = Tensor(np.zeros(len(labels)), requires_grad=True)
    return ClassifierHead(W, b, list(labels))


def head_logits(hidden: Tensor, head: ClassifierHead) -> Tensor:
    if hidden.shape[-1] != head.W_cls.shape[0]:
        raise ad.ShapeMismatch(f"classify: hidden {hidden.shape} vs W_cls {head.W_cls.shape}")
    return ad.add(ad.matmul(hidden, head.W_cls), head.b_cls)


def classify_tokens(hidden: Tensor, head: ClassifierHead) -> Tensor:
    """Per-piece probability rows over the label set (rows sum to 1)."""
    return ad.softmax(head_logits(hidden, head))


@dataclass
class MlmHead:
    """Vocabulary projection weight-tied to the input embedding (same storage)."""

    embedding: Tensor

    @classmethod
    def tied(cls, model: Encoder) -> "MlmHead":
        return cls(model.tok_embed)


def mlm_logits(hidden: Tensor, head: MlmHead) -> Tensor:
    return ad.matmul(hidden, ad.transpose(head.embedding))


# -- checkpoint io ------------------------------------------------------------


def save_backbone(model: Encoder, path: str | Path, provenance: dict | None = None) -> None:
    """Header (magic, version, config, param manifest) + raw little-endian blocks."""
    params = model.base_parameters()
    header = {
        "kind": "backbone",
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params],
        "dtype": "<f8",
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_backbone(path: str | Path) -> tuple[Encoder, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a backbone checkpoint: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        model = Encoder(EncoderConfig.from_dict(header["config"]), ad.make_rng(0))
        by_name = dict(model.base_parameters())
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n_bytes = int(np.prod(shape)) * 8
            arr = np.frombuffer(fh.read(n_bytes), dtype="<f8").reshape(shape)
            by_name[entry["name"]].data[...] = arr
    return model, header
