"""Multilingual substrate shared by students and teachers.

Zero-shot languages never contribute labelled data, so some pre-training has to tie their
tokens to the supervised ones.  Two stages are provided:

* aligned embedding init: every cipher image of base token ``t`` starts from one shared
  vector plus language-specific Gaussian noise (``noise`` sets cross-lingual distance);
* self-supervised training on unlabelled pairs from all languages: masked-token prediction
  (output layer tied to the token table) or cross-segment token matching.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import MblmModel
from .nn import AdamState, Batch, adam_step
from .synth import CLS, MASK, N_SPECIAL, PAD, SEP, BatchStream, DatasetBundle, pretrain_corpus
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)


OBJECTIVES = ("mlm", "match")


@dataclass
class PretrainPlan:
    noise: float = 0.5
    objective: str = "match"
    steps: int = 0
    examples: int = 4000
    mask_rate: float = 0.15
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown pre-training objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.noise < 0 or self.steps < 0 or self.examples < 1:
            raise ConfigError("noise and steps must be >= 0, examples >= 1")
        if self.lr <= 0 or self.batch_size < 1 or not 0 < self.mask_rate < 1:
            raise ConfigError("lr, batch_size and mask_rate out of range")


def aligned_embedding_init(model: MblmModel, bundle: DatasetBundle, noise: float, seed: int) -> None:
    """Overwrite the token table so every language's image of a base token shares one vector."""
    rng = np.random.default_rng([seed, 11])
    table = model.embed.token.data
    d = table.shape[1]
    scale = float(np.std(table)) or 0.1
    W = bundle.config.base_vocab
    shared = rng.normal(0.0, scale, (W, d))
    for spec in bundle.languages:
        base_ids = np.arange(N_SPECIAL, N_SPECIAL + W)
        own = spec.permutation[base_ids]
        table[own] = (shared + noise * rng.normal(0.0, scale, (W, d))).astype(DTYPE)
    # the unused base block: keep it out of reach of any real token
    table[N_SPECIAL : N_SPECIAL + W] = rng.normal(0.0, scale, (W, d)).astype(DTYPE)


def mask_tokens(tokens: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(inputs with [MASK] substituted, boolean target mask); at least one target per row."""
    content = (tokens != PAD) & (tokens != CLS) & (tokens != SEP)
    chosen = content & (rng.random(tokens.shape) < rate)
    for i in np.flatnonzero(~chosen.any(axis=1)):
        cand = np.flatnonzero(content[i])
        if cand.size:
            chosen[i, rng.choice(cand)] = True
    inputs = np.where(chosen, MASK, tokens)
    return inputs, chosen


def mlm_loss(model: MblmModel, batch: Batch, targets: np.ndarray, chosen: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions; vocabulary logits via the tied token table."""
    h = _encode(model, batch)
    logits = T.matmul(h, T.transpose(model.embed.token, (1, 0)))  # [N, n, V]
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    rows, cols = np.nonzero(chosen)
    onehot[rows, cols, targets[rows, cols]] = 1.0
    return T.scale(T.tsum(T.log_softmax(logits, -1) * T.Tensor(onehot)), -1.0 / max(1, rows.size))


def _encode(model: MblmModel, batch: Batch) -> Tensor:
    h = model.embed(batch)
    pad = batch.pad_mask
    for i in model.shared_layers:
        h = model.shared[i](h, pad)
    return model.final_norm(h)


def match_targets(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per position: 1 if the token also occurs in the other segment; plus a content mask."""
    N, n = tokens.shape
    target = np.zeros((N, n), dtype=np.int64)
    content = np.zeros((N, n), dtype=bool)
    for i in range(N):
        row = tokens[i]
        seps = np.flatnonzero(row == SEP)
        a_idx = np.arange(1, seps[0])
        b_idx = np.arange(seps[0] + 1, seps[1])
        a_set, b_set = set(row[a_idx].tolist()), set(row[b_idx].tolist())
        for j in a_idx:
            target[i, j] = row[j] in b_set
        for j in b_idx:
            target[i, j] = row[j] in a_set
        content[i, a_idx] = True
        content[i, b_idx] = True
    return target, content


def match_loss(model: MblmModel, head: Tensor, batch: Batch) -> Tensor:
    """Cross-segment token matching: a self-supervised target computed from the input alone."""
    target, content = match_targets(batch.tokens)
    logits = T.matmul(_encode(model, batch), head)  # [N, n, 2]
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    rows, cols = np.nonzero(content)
    onehot[rows, cols, target[rows, cols]] = 1.0
    return T.scale(T.tsum(T.log_softmax(logits, -1) * T.Tensor(onehot)), -1.0 / max(1, rows.size))


def self_supervised_pretrain(model: MblmModel, bundle: DatasetBundle, plan: PretrainPlan) -> list[float]:
    """Self-supervised pre-training on unlabelled pairs from every language."""
    if model.branch_layers:
        raise ConfigError("pre-training runs on the standard base model")
    if plan.objective not in OBJECTIVES:
        raise ConfigError(f"unknown pre-training objective {plan.objective!r}")
    if plan.steps <= 0:
        return []
    corpus = pretrain_corpus(bundle, plan.examples, plan.seed)
    names = [spec.name for spec in bundle.languages]
    streams = {
        name: BatchStream([ex for ex in corpus if ex.language == name], plan.batch_size, [plan.seed, 13, i])
        for i, name in enumerate(names)
    }
    rng = np.random.default_rng([plan.seed, 17])
    params = dict(model.named_parameters())
    d = model.config.d_model
    head = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, 2)), requires_grad=True)
    params["~pretrain_head"] = head
    adam = AdamState(lr=plan.lr)
    losses = []
    for _ in range(plan.steps):
        batch = next(streams[names[int(rng.integers(len(names)))]])
        model.zero_grad()
        head.zero_grad()
        if plan.objective == "mlm":
            inputs, chosen = mask_tokens(batch.tokens, plan.mask_rate, rng)
            loss = mlm_loss(model, Batch(inputs, batch.language), batch.tokens, chosen)
        else:
            loss = match_loss(model, head, batch)
        loss.backward()
        adam_step(params, adam)
        losses.append(loss.item())
    return losses


def pretrain_base(model: MblmModel, bundle: DatasetBundle, plan: PretrainPlan) -> list[float]:
    if model.branch_layers:
        raise ConfigError("pre-training runs on the standard base model")
    cfg = bundle.config
    if model.config.vocab_size != cfg.vocab_size or model.config.max_len < cfg.seq_len:
        raise ConfigError(
            f"model vocabulary/length ({model.config.vocab_size}, {model.config.max_len}) does not fit the "
            f"dataset ({cfg.vocab_size}, {cfg.seq_len})"
        )
    aligned_embedding_init(model, bundle, plan.noise, plan.seed)
    losses = self_supervised_pretrain(model, bundle, plan)
    if losses:
        log.info("pretrain loss %.3f -> %.3f", losses[0], np.mean(losses[-50:]))
    model.zero_grad()
    return losses
