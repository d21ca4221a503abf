"""Transformer encoder pieces: embeddings, pre-norm blocks, classifier head, losses, Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import DTYPE, Tensor

PAD_ID = 0


@dataclass
class Batch:
    """Padded token-id matrix for one language plus optional labels and feature ids."""

    tokens: np.ndarray
    language: str
    labels: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise DataError(f"batch tokens must be [N, n], got shape {self.tokens.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.int64)

    @property
    def pad_mask(self) -> np.ndarray:
        """True where the position is padding."""
        return self.tokens == PAD_ID

    def __len__(self) -> int:
        return self.tokens.shape[0]


class Module:
    """Holds named parameters and child modules; names are dot-joined paths."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d, dtype=DTYPE))
        self.beta = self.add_param("beta", np.zeros(d, dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, -1) * self.gamma + self.beta


class EmbeddingLayer(Module):
    def __init__(self, vocab_size: int, max_len: int, d: int, n_features: int = 0,
                 rng: np.random.Generator | None = None, std: float = 0.1):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size, self.max_len, self.n_features = vocab_size, max_len, n_features
        self.token = self.add_param("token", rng.normal(0.0, std, (vocab_size, d)))
        self.position = self.add_param("position", rng.normal(0.0, std, (max_len, d)))
        self.feature = (
            self.add_param("feature", rng.normal(0.0, std, (n_features, d))) if n_features else None
        )

    def __call__(self, batch: Batch) -> Tensor:
        return embed(batch, self)


def _check_ids(ids: np.ndarray, limit: int, what: str) -> None:
    bad = np.argwhere((ids < 0) | (ids >= limit))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise DataError(f"{what} id {int(ids[pos])} at position {pos} out of range [0, {limit})")


def embed(batch: Batch, layer: EmbeddingLayer) -> Tensor:
    """Token + learned position (+ optional feature) embeddings, shape [N, n, d]."""
    ids = batch.tokens
    n = ids.shape[1]
    if n > layer.max_len:
        raise DataError(f"sequence length {n} exceeds max_len {layer.max_len}")
    _check_ids(ids, layer.vocab_size, "token")
    h = T.gather(layer.token, ids) + layer.position[:n]
    if layer.feature is not None and batch.features is not None:
        _check_ids(batch.features, layer.n_features, "feature")
        h = h + T.gather(layer.feature, batch.features)
    return h


def attention_bias(pad_mask: np.ndarray) -> np.ndarray:
    """[N, 1, 1, n] additive bias: -inf at padded key positions."""
    bias = np.where(pad_mask, -np.inf, 0.0).astype(DTYPE)
    return bias[:, None, None, :]


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)) with GELU."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"d_model {d} is not divisible by n_heads {n_heads}")
        self.d, self.n_heads, self.dropout = d, n_heads, dropout
        s = 1.0 / math.sqrt(d)
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.wq = self.add_param("wq", rng.normal(0.0, s, (d, d)))
        self.wk = self.add_param("wk", rng.normal(0.0, s, (d, d)))
        self.wv = self.add_param("wv", rng.normal(0.0, s, (d, d)))
        self.wo = self.add_param("wo", rng.normal(0.0, s, (d, d)))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.w1 = self.add_param("w1", rng.normal(0.0, s, (d, d_ff)))
        self.b1 = self.add_param("b1", np.zeros(d_ff))
        self.w2 = self.add_param("w2", rng.normal(0.0, 1.0 / math.sqrt(d_ff), (d_ff, d)))
        self.b2 = self.add_param("b2", np.zeros(d))

    def attention(self, x: Tensor, bias: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (context projected by wo, attention probabilities [N, h, n, n])."""
        N, n, d = x.shape
        h, dh = self.n_heads, d // self.n_heads

        def heads(t: Tensor) -> Tensor:
            return T.transpose(t.reshape(N, n, h, dh), (0, 2, 1, 3))

        q, k, v = heads(x @ self.wq), heads(x @ self.wk), heads(x @ self.wv)
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        probs = T.softmax(scores + T.Tensor(bias), axis=-1)
        ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3)).reshape(N, n, d)
        return ctx @ self.wo, probs

    def __call__(self, x: Tensor, pad_mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        return block_forward(x, self, pad_mask, rng)


def block_forward(x: Tensor, block: TransformerBlock, pad_mask: np.ndarray,
                  rng: np.random.Generator | None = None) -> Tensor:
    if x.ndim != 3 or x.shape[-1] != block.d:
        raise ShapeError(f"block expects [N, n, {block.d}], got {x.shape}")
    attn, _ = block.attention(block.ln1(x), attention_bias(pad_mask))
    x = x + T.dropout(attn, block.dropout, rng)
    ff = T.gelu(block.ln2(x) @ block.w1 + block.b1) @ block.w2 + block.b2
    return x + T.dropout(ff, block.dropout, rng)


class ClassifierHead(Module):
    """Linear layer on the first-position vector; optional tanh pooler in front."""

    def __init__(self, d: int, n_classes: int, rng: np.random.Generator, pooler: bool = False):
        super().__init__()
        self.pooler = None
        if pooler:
            self.pooler = self.add_param("pooler", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
            self.pooler_bias = self.add_param("pooler_bias", np.zeros(d))
        self.weight = self.add_param("weight", rng.normal(0.0, 1.0 / math.sqrt(d), (d, n_classes)))
        self.bias = self.add_param("bias", np.zeros(n_classes))

    def __call__(self, h: Tensor) -> Tensor:
        return classify(h, self)


def classify(h: Tensor, head: ClassifierHead) -> Tensor:
    first = h[:, 0, :]
    if head.pooler is not None:
        first = T.tanh(first @ head.pooler + head.pooler_bias)
    return first @ head.weight + head.bias


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.argwhere((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0][0])
        raise DataError(f"label {int(labels[i])} at row {i} out of range [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the gold class."""
    N, C = logits.shape
    target = _one_hot(labels, C)
    return T.scale(T.tsum(T.log_softmax(logits, -1) * T.Tensor(target)), -1.0 / N)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Parameters whose ``grad`` is None took no part in the loss and are left untouched,
    moments included.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(DTYPE)
