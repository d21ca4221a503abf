"""Synthetic multilingual sentence-pair classification.

A base task is generated once over a small content vocabulary.  Each "language" is a
cipher of the base task: a bijective token renaming onto its own disjoint id block, with
special tokens fixed.  Labels depend only on token equality between the two segments, so
they survive every cipher unchanged.

Vocabulary layout::

    0 PAD | 1 CLS | 2 SEP | 3 MASK | block 0 (base form) | block 1 | ... | block B

Language ``j`` owns block ``j + 1``; block 0 holds the base form and never reaches a model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .nn import Batch

PAD, CLS, SEP, MASK = 0, 1, 2, 3
N_SPECIAL = 4
TASKS = ("pattern-match", "relation")


@dataclass
class Example:
    tokens: tuple[int, ...]
    label: int
    language: str

    def segments(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return split_pair(self.tokens)


@dataclass
class LanguageSpec:
    name: str
    permutation: np.ndarray
    role: str = "supervised"

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        if self.role not in ("supervised", "zero-shot"):
            raise ConfigError(f"language role must be 'supervised' or 'zero-shot', got {self.role!r}")
        check_bijection(self.permutation)

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return inv


@dataclass
class TaskConfig:
    task: str = "pattern-match"
    n_classes: int = 3
    base_vocab: int = 24
    segment_len: int = 5
    n_supervised: int = 3
    n_zero_shot: int = 5
    train_size: int = 2000
    dev_size: int = 300
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.n_classes not in (3, 5):
            raise ConfigError(f"n_classes must be 3 or 5, got {self.n_classes}")
        if self.segment_len < 2:
            raise ConfigError("segment_len must be at least 2")
        if self.task == "pattern-match" and self.base_vocab < 2 * self.segment_len:
            raise ConfigError(
                f"base_vocab {self.base_vocab} too small for two segments of {self.segment_len}"
            )
        if self.task == "relation" and self.base_vocab < self.segment_len:
            raise ConfigError("base_vocab must cover one segment of distinct tokens")
        if len(label_buckets(self.task, self.segment_len, self.n_classes)) != self.n_classes:
            raise ConfigError(
                f"segment_len {self.segment_len} cannot express {self.n_classes} classes for {self.task}"
            )
        if self.n_supervised < 1 or self.n_zero_shot < 0:
            raise ConfigError("need >= 1 supervised and >= 0 zero-shot languages")
        for name in ("train_size", "dev_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        capacity = base_pair_capacity(self)
        needed = self.train_size + self.dev_size + self.test_size
        if needed > capacity // 4:
            raise ConfigError(f"requested {needed} distinct base examples; enumeration capacity ~{capacity}")

    @property
    def seq_len(self) -> int:
        return 2 * self.segment_len + 3

    @property
    def n_languages(self) -> int:
        return self.n_supervised + self.n_zero_shot

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + (self.n_languages + 1) * self.base_vocab

    @property
    def supervised(self) -> list[str]:
        return [f"sp{i}" for i in range(self.n_supervised)]

    @property
    def zero_shot(self) -> list[str]:
        return [f"zs{i}" for i in range(self.n_zero_shot)]

    @property
    def languages(self) -> list[str]:
        return self.supervised + self.zero_shot

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {unknown}")
        return cls(**data)


def base_pair_capacity(cfg: TaskConfig) -> int:
    from math import factorial, perm

    m, W = cfg.segment_len, cfg.base_vocab
    if cfg.task == "pattern-match":
        return perm(W, m) * perm(W, m)
    return perm(W, m) * factorial(m)


# -- labelling rule ---------------------------------------------------------------------
def label_buckets(task: str, m: int, n_classes: int) -> list[list[int]]:
    """Agreement counts grouped into classes, label 0 first ("match" = most agreement).

    pattern-match counts tokens shared by the two segments (0..m).  relation counts
    positions where the second segment, a rearrangement of the first, agrees with it;
    m-1 agreements are impossible for a rearrangement, so that count is skipped.
    """
    counts = list(range(m, -1, -1))
    if task == "relation":
        counts = [c for c in counts if c != m - 1]
    if len(counts) < n_classes:
        return []
    chunks = np.array_split(np.arange(len(counts)), n_classes)
    return [[counts[i] for i in chunk] for chunk in chunks]


def agreement(task: str, a: Sequence[int], b: Sequence[int]) -> int:
    if task == "pattern-match":
        return len(set(a) & set(b))
    return sum(1 for x, y in zip(a, b) if x == y)


def split_pair(tokens: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    toks = [t for t in tokens if t != PAD]
    if not toks or toks[0] != CLS or toks.count(SEP) != 2 or toks[-1] != SEP:
        raise DataError(f"not a [CLS] a [SEP] b [SEP] sequence: {list(tokens)}")
    mid = toks.index(SEP)
    return tuple(toks[1:mid]), tuple(toks[mid + 1 : -1])


def rule_label(task: str, tokens: Sequence[int], m: int, n_classes: int) -> int:
    """Independent re-derivation of the label from the surface tokens."""
    a, b = split_pair(tokens)
    c = agreement(task, a, b)
    for label, bucket in enumerate(label_buckets(task, m, n_classes)):
        if c in bucket:
            return label
    raise DataError(f"agreement count {c} falls outside every class bucket")


# -- base task ---------------------------------------------------------------------------
def _pattern_pair(rng: np.random.Generator, W: int, m: int, c: int) -> tuple[list[int], list[int]]:
    a = rng.choice(W, size=m, replace=False)
    rest = np.setdiff1d(np.arange(W), a)
    shared = rng.choice(a, size=c, replace=False)
    fresh = rng.choice(rest, size=m - c, replace=False)
    b = np.concatenate([shared, fresh])
    rng.shuffle(b)
    return a.tolist(), b.tolist()


def _relation_pair(rng: np.random.Generator, W: int, m: int, c: int) -> tuple[list[int], list[int]]:
    a = rng.choice(W, size=m, replace=False)
    fixed = set(rng.choice(m, size=c, replace=False).tolist())
    moved = [i for i in range(m) if i not in fixed]
    # derangement of the moved positions by rejection; |moved| is never 1
    while True:
        perm = rng.permutation(len(moved))
        if len(moved) == 0 or all(perm[i] != i for i in range(len(moved))):
            break
    b = a.copy()
    for i, j in zip(moved, perm):
        b[i] = a[moved[j]]
    return a.tolist(), b.tolist()


def generate_base_task(cfg: TaskConfig, count: int, rng: np.random.Generator,
                       exclude: set[tuple[int, ...]] | None = None) -> list[Example]:
    """``count`` distinct base-form examples with labels balanced to within one."""
    m, W, C = cfg.segment_len, cfg.base_vocab, cfg.n_classes
    buckets = label_buckets(cfg.task, m, C)
    make = _pattern_pair if cfg.task == "pattern-match" else _relation_pair
    seen = set(exclude or ())
    labels = np.arange(count) % C
    rng.shuffle(labels)
    out = []
    for label in labels.tolist():
        for _ in range(1000):
            c = int(rng.choice(buckets[label]))
            a, b = make(rng, W, m, c)
            tokens = (CLS, *(N_SPECIAL + t for t in a), SEP, *(N_SPECIAL + t for t in b), SEP)
            if tokens not in seen:
                break
        else:
            raise ConfigError("could not draw a fresh example; enlarge base_vocab or segment_len")
        seen.add(tokens)
        out.append(Example(tokens, label, "base"))
    return out


# -- ciphers -----------------------------------------------------------------------------
def check_bijection(perm: np.ndarray) -> None:
    perm = np.asarray(perm)
    if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
        raise ConfigError("language permutation is not a bijection over token ids")
    if perm.size >= N_SPECIAL and not np.array_equal(perm[:N_SPECIAL], np.arange(N_SPECIAL)):
        raise ConfigError("special tokens must map to themselves")


def block_range(cfg: TaskConfig, block: int) -> range:
    start = N_SPECIAL + block * cfg.base_vocab
    return range(start, start + cfg.base_vocab)


def make_language(cfg: TaskConfig, index: int, rng: np.random.Generator) -> LanguageSpec:
    """Cipher sending base block 0 onto block ``index + 1`` (shuffled), and back."""
    perm = np.arange(cfg.vocab_size)
    shuffle = rng.permutation(cfg.base_vocab)
    base = np.asarray(block_range(cfg, 0))
    own = np.asarray(block_range(cfg, index + 1))
    perm[base] = own[shuffle]
    perm[own[shuffle]] = base
    name = cfg.languages[index]
    role = "supervised" if index < cfg.n_supervised else "zero-shot"
    return LanguageSpec(name, perm, role)


def make_languages(cfg: TaskConfig) -> list[LanguageSpec]:
    rng = np.random.default_rng([cfg.seed, 1])
    return [make_language(cfg, i, rng) for i in range(cfg.n_languages)]


def derive_cipher_language(examples: Sequence[Example], spec: LanguageSpec) -> list[Example]:
    perm = spec.permutation
    return [Example(tuple(int(perm[t]) for t in ex.tokens), ex.label, spec.name) for ex in examples]


# -- bundle -----------------------------------------------------------------------------
@dataclass
class DatasetBundle:
    config: TaskConfig
    languages: list[LanguageSpec]
    splits: dict[str, dict[str, list[Example]]] = field(default_factory=dict)

    @property
    def supervised(self) -> list[str]:
        return [l.name for l in self.languages if l.role == "supervised"]

    @property
    def zero_shot(self) -> list[str]:
        return [l.name for l in self.languages if l.role == "zero-shot"]

    def split(self, language: str, split: str) -> list[Example]:
        try:
            return self.splits[language][split]
        except KeyError:
            raise DataError(f"no {split!r} split for language {language!r}") from None

    def language(self, name: str) -> LanguageSpec:
        for spec in self.languages:
            if spec.name == name:
                return spec
        raise DataError(f"unknown language {name!r}")


def base_key(ex: Example, spec: LanguageSpec) -> str:
    inv = spec.inverse()
    return hashlib.sha1(bytes(str([int(inv[t]) for t in ex.tokens]), "ascii")).hexdigest()


def build_splits(cfg: TaskConfig) -> DatasetBundle:
    """Deterministic per-language train/dev/test splits.

    One base pool per split (disjoint across splits) is ciphered into every language;
    zero-shot languages get no training split.
    """
    cfg.validate()
    langs = make_languages(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    pools: dict[str, list[Example]] = {}
    used: set[tuple[int, ...]] = set()
    for split, size in (("train", cfg.train_size), ("dev", cfg.dev_size), ("test", cfg.test_size)):
        pools[split] = generate_base_task(cfg, size, rng, exclude=used)
        used.update(ex.tokens for ex in pools[split])
    bundle = DatasetBundle(cfg, langs)
    for spec in langs:
        bundle.splits[spec.name] = {
            split: ([] if split == "train" and spec.role == "zero-shot" else derive_cipher_language(pool, spec))
            for split, pool in pools.items()
        }
    check_disjoint(bundle)
    return bundle


def check_disjoint(bundle: DatasetBundle) -> None:
    owner: dict[str, str] = {}
    for spec in bundle.languages:
        for split, examples in bundle.splits[spec.name].items():
            for ex in examples:
                key = base_key(ex, spec)
                if owner.setdefault(key, split) != split:
                    raise DataError(f"example appears in both {owner[key]} and {split} splits")


def pretrain_corpus(bundle: DatasetBundle, count: int, seed: int) -> list[Example]:
    """Unlabeled pairs spread evenly over every language, disjoint from all task splits."""
    rng = np.random.default_rng([seed, 7])
    cfg = bundle.config
    first = bundle.languages[0]
    used = set()
    for examples in bundle.splits[first.name].values():
        inv = first.inverse()
        used.update(tuple(int(inv[t]) for t in ex.tokens) for ex in examples)
    base = generate_base_task(cfg, count, rng, exclude=used)
    out: list[Example] = []
    for i, ex in enumerate(base):
        spec = bundle.languages[i % len(bundle.languages)]
        out.extend(derive_cipher_language([ex], spec))
    return out


# -- batching ---------------------------------------------------------------------------
def to_batch(examples: Sequence[Example], pad_to: int | None = None) -> Batch:
    if not examples:
        raise DataError("cannot batch an empty example list")
    langs = {ex.language for ex in examples}
    if len(langs) != 1:
        raise DataError(f"a batch must hold one language, got {sorted(langs)}")
    n = pad_to or max(len(ex.tokens) for ex in examples)
    tokens = np.full((len(examples), n), PAD, dtype=np.int64)
    for i, ex in enumerate(examples):
        tokens[i, : len(ex.tokens)] = ex.tokens
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(tokens, langs.pop(), labels)


class BatchStream:
    """Endless shuffled epochs over one split; the final partial batch of each epoch is kept.

    The shuffle state is explicit so a stream can be checkpointed and resumed.
    """

    def __init__(self, examples: Sequence[Example], batch_size: int, seed=None, shuffle: bool = True):
        if not examples:
            raise DataError("cannot iterate an empty split")
        self.examples = examples
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self.order = self._new_order()
        self.pos = 0

    def _new_order(self) -> np.ndarray:
        n = len(self.examples)
        return self.rng.permutation(n) if self.shuffle else np.arange(n)

    def __iter__(self) -> "BatchStream":
        return self

    def __next__(self) -> Batch:
        if self.pos >= len(self.order):
            self.order = self._new_order()
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += len(idx)
        return to_batch([self.examples[i] for i in idx])

    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(), "pos": self.pos}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])


def batch_iterator(examples: Sequence[Example], batch_size: int, seed=None,
                   shuffle: bool = True) -> BatchStream:
    return BatchStream(examples, batch_size, seed, shuffle)


def epoch_batches(examples: Sequence[Example], batch_size: int) -> list[Batch]:
    """One ordered pass (evaluation)."""
    return [to_batch(examples[i : i + batch_size]) for i in range(0, len(examples), batch_size)]


# -- serialization ----------------------------------------------------------------------
def save_bundle(bundle: DatasetBundle, path: str | Path) -> None:
    """Line-delimited JSON: one header record, then one record per example."""
    path = Path(path)
    header = {
        "kind": "header",
        "format": "mblm-dataset",
        "version": 1,
        "config": bundle.config.to_dict(),
        "languages": [
            {"name": s.name, "role": s.role, "permutation": s.permutation.tolist()} for s in bundle.languages
        ],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for spec in bundle.languages:
            for split, examples in bundle.splits[spec.name].items():
                for ex in examples:
                    rec = {"language": spec.name, "split": split, "tokens": list(ex.tokens), "label": ex.label}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)


def load_bundle(path: str | Path) -> DatasetBundle:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "header" or header.get("format") != "mblm-dataset":
            raise DataError(f"{path} lacks an mblm-dataset header record")
        cfg = TaskConfig.from_dict(header["config"])
        langs = [LanguageSpec(l["name"], np.asarray(l["permutation"]), l["role"]) for l in header["languages"]]
        bundle = DatasetBundle(cfg, langs)
        for spec in langs:
            bundle.splits[spec.name] = {"train": [], "dev": [], "test": []}
        for lineno, line in enumerate(fh, start=2):
            rec = json.loads(line)
            try:
                bundle.splits[rec["language"]][rec["split"]].append(
                    Example(tuple(rec["tokens"]), int(rec["label"]), rec["language"])
                )
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
    return bundle
