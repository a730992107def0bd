"""LoRA adapter injection, merging, parameter accounting, and adapter persistence."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    CHECKPOINT_VERSION,
    Encoder,
    EncoderConfig,
    ClassifierHead,
    INIT_STD,
)

ADAPTER_MAGIC = b"PNAD"

TARGET_NAMES = ("query", "key", "value", "output")


class UnknownTarget(Exception):
    pass


class FingerprintMismatch(Exception):
    pass


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.targets = tuple(self.targets)
        for t in self.targets:
            if t not in TARGET_NAMES:
                raise UnknownTarget(f"unknown target projection {t!r}; expected one of {TARGET_NAMES}")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "dropout": self.dropout,
                "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(rank=d["rank"], alpha=d["alpha"], dropout=d["dropout"],
                   targets=tuple(d["targets"]))


@dataclass
class LoraAdapter:
    """Per-projection low-rank factors; the host Linear adds (alpha/r) * x A^T B^T."""

    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    rank: int
    alpha: float
    dropout: float


@dataclass
class AdapterState:
    """Detached adapter factors plus the config and base-model fingerprint."""

    config: LoraConfig
    fingerprint: str
    matrices: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def fingerprint(model: Encoder) -> str:
    """64-bit hash over the encoder config and base parameter bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8"))
    for name, t in model.base_parameters():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def inject(model: Encoder, config: LoraConfig, rng: np.random.Generator) -> Encoder:
    """Attach fresh adapters to the target projections and freeze the base.

    A is Gaussian (std 0.02), B is zero, so the adapted model computes the
    base function exactly until training moves B.
    """
    for _, t in model.base_parameters():
        t.requires_grad = False
        t.grad = None
    for layer in model.layers:
        for tname in config.targets:
            lin = layer.projections[tname]
            d_out, d_in = lin.weight.shape
            A = Tensor(rng.normal(0.0, INIT_STD, size=(config.rank, d_in)), requires_grad=True)
            B = Tensor(np.zeros((d_out, config.rank)), requires_grad=True)
            lin.adapter = LoraAdapter(A, B, config.rank, config.alpha, config.dropout)
    return model


def effective_weight(W: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float, rank: int) -> np.ndarray:
    """W + (alpha/rank) * B A."""
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[1] != A.shape[0] or W.shape != (B.shape[0], A.shape[1]):
        raise ad.ShapeMismatch(f"effective_weight: W {W.shape}, B {B.shape}, A {A.shape}")
    return W + (alpha / rank) * (B @ A)


def merge(model: Encoder) -> Encoder:
    """Fold adapters into the base weights; returns a plain trainable backbone.

    The merged model reproduces the adapted forward pass with dropout
    disabled (dropout is a train-time-only effect).
    """
    merged = model.clone()
    for layer_src, layer_dst in zip(model.layers, merged.layers):
        for tname in TARGET_NAMES:
            a = layer_src.projections[tname].adapter
            if a is not None:
                lin = layer_dst.projections[tname]
                lin.weight.data[...] = effective_weight(
                    lin.weight.data, a.A.data, a.B.data, a.alpha, a.rank
                )
    for _, t in merged.base_parameters():
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return merged


@dataclass
class ParamBudget:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def percent(self) -> float:
        if self.total == 0:
            return 0.0
        return 100.0 * self.trainable / self.total


def trainable_fraction(model: Encoder, head: ClassifierHead | None = None) -> ParamBudget:
    """Count trainable vs frozen parameters over the model (and optional head)."""
    trainable = frozen = 0
    for _, t in model.all_parameters():
        if t.requires_grad:
            trainable += t.size
        else:
            frozen += t.size
    if head is not None:
        for _, t in head.parameters():
            if t.requires_grad:
                trainable += t.size
            else:
                frozen += t.size
    return ParamBudget(trainable, frozen)


def extract_adapter(model: Encoder, config: LoraConfig | None = None) -> AdapterState:
    matrices: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    found: LoraAdapter | None = None
    for i, layer in enumerate(model.layers):
        for tname in TARGET_NAMES:
            a = layer.projections[tname].adapter
            if a is not None:
                matrices[f"layer{i}.{tname}"] = (a.A.data.copy(), a.B.data.copy())
                found = a
    if config is None:
        if found is None:
            raise ValueError("model has no adapters to extract")
        targets = tuple(t for t in TARGET_NAMES
                        if any(l.projections[t].adapter is not None for l in model.layers))
        config = LoraConfig(found.rank, found.alpha, found.dropout, targets)
    return AdapterState(config, fingerprint(model), matrices)


def apply_adapter(model: Encoder, state: AdapterState) -> Encoder:
    """Install saved adapter factors onto a base model; the fingerprint must match."""
    fp = fingerprint(model)
    if fp != state.fingerprint:
        raise FingerprintMismatch(
            f"adapter was trained against base {state.fingerprint}, got {fp}"
        )
    inject(model, state.config, ad.make_rng(0))
    for i, layer in enumerate(model.layers):
        for tname in state.config.targets:
            A, B = state.matrices[f"layer{i}.{tname}"]
            adapter = layer.projections[tname].adapter
            adapter.A.data[...] = A
            adapter.B.data[...] = B
    return model


# -- adapter checkpoint io -----------------------------------------------------


def save_adapter(
    state: AdapterState,
    path: str | Path,
    head: ClassifierHead | None = None,
    provenance: dict | None = None,
) -> None:
    entries = []
    blocks: list[np.ndarray] = []
    for name in sorted(state.matrices):
        A, B = state.matrices[name]
        entries.append({"name": name, "a_shape": list(A.shape), "b_shape": list(B.shape)})
        blocks.extend([A, B])
    header = {
        "kind": "adapter",
        "lora": state.config.to_dict(),
        "fingerprint": state.fingerprint,
        "matrices": entries,
        "head": None,
        "dtype": "<f8",
        "provenance": provenance or {},
    }
    if head is not None:
        header["head"] = {"labels": head.labels, "w_shape": list(head.W_cls.shape)}
        blocks.extend([head.W_cls.data, head.b_cls.data])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ADAPTER_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_adapter(path: str | Path) -> tuple[AdapterState, ClassifierHead | None, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ADAPTER_MAGIC:
            raise ValueError(f"not an adapter checkpoint: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))

        def read_array(shape):
            shape = tuple(shape)
            n_bytes = int(np.prod(shape)) * 8
            return np.frombuffer(fh.read(n_bytes), dtype="<f8").reshape(shape).copy()

        matrices = {}
        for entry in header["matrices"]:
            A = read_array(entry["a_shape"])
            B = read_array(entry["b_shape"])
            matrices[entry["name"]] = (A, B)
        state = AdapterState(LoraConfig.from_dict(header["lora"]), header["fingerprint"], matrices)
        head = None
        if header["head"] is not None:
            labels = header["head"]["labels"]
            W = read_array(header["head"]["w_shape"])
            b = read_array([W.shape[1]])
            head = ClassifierHead(Tensor(W, requires_grad=True), Tensor(b, requires_grad=True), labels)
    return state, head, header
