"""Multi-branch multilingual encoder and its ablation structures.

The bottom ``K`` transformer layers are replicated once per supervised language.  After
every branch layer a mixer combines the branch outputs feature-wise; the last mixer (the
outer-mixer) emits a single representation for the shared top layers.  In training, a
batch in language ``k`` has every other branch's output detached, so only branch ``k``
(and the mixer submodules feeding it) learns from that batch.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import (
    Batch,
    ClassifierHead,
    EmbeddingLayer,
    LayerNorm,
    Module,
    TransformerBlock,
    classify,
)
from .tensor import DTYPE, Tensor

OUTER = "out"


class StructureVariant(str, enum.Enum):
    STANDARD = "standard"
    MBLM = "mblm"
    NO_INNER_MIXERS = "no-inner-mixers"
    NO_MIXERS_SINGLE = "no-mixers-single"
    NO_MIXERS_ALL = "no-mixers-all"
    NO_DETACH = "no-detach"
    BRANCHES_AT_TOP = "branches-at-top"
    BRANCHES_AT_TOP_MULTI = "branches-at-top-multi-classifier"

    @classmethod
    def parse(cls, value: "str | StructureVariant") -> "StructureVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for v in cls:
            if key in (v.value, v.name.lower().replace("_", "-")):
                return v
        raise ConfigError(f"unknown structure variant {value!r}; choose from {[v.value for v in cls]}")

    @property
    def has_branches(self) -> bool:
        return self is not StructureVariant.STANDARD

    @property
    def branches_on_top(self) -> bool:
        return self in (StructureVariant.BRANCHES_AT_TOP, StructureVariant.BRANCHES_AT_TOP_MULTI)

    @property
    def detaches(self) -> bool:
        return self in (
            StructureVariant.MBLM,
            StructureVariant.NO_INNER_MIXERS,
            StructureVariant.BRANCHES_AT_TOP,
            StructureVariant.BRANCHES_AT_TOP_MULTI,
        )


@dataclass
class ModelConfig:
    n_layers: int = 4
    branch_depth: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    languages: tuple[str, ...] = ("l0", "l1", "l2")
    n_classes: int = 3
    vocab_size: int = 64
    max_len: int = 16
    variant: StructureVariant = StructureVariant.MBLM
    tau: float = 8.0
    dropout: float = 0.0
    n_features: int = 0
    pooler: bool = False
    embed_std: float = 0.1

    def __post_init__(self):
        self.languages = tuple(str(x) for x in self.languages)
        self.variant = StructureVariant.parse(self.variant)
        self.validate()

    @property
    def n_supervised(self) -> int:
        return len(self.languages)

    def validate(self) -> None:
        if not 0 <= self.branch_depth <= self.n_layers:
            raise ConfigError(f"branch depth K={self.branch_depth} must lie in [0, L={self.n_layers}]")
        if self.n_supervised < 1:
            raise ConfigError("at least one supervised language is required")
        if len(set(self.languages)) != self.n_supervised:
            raise ConfigError(f"duplicate language names in {self.languages}")
        if OUTER in self.languages:
            raise ConfigError(f"{OUTER!r} is reserved for the outer-mixer")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "n_classes", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.value
        out["languages"] = list(self.languages)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)

    # -- structure ---------------------------------------------------------------
    def branch_layers(self) -> list[int]:
        if not self.variant.has_branches or self.branch_depth == 0:
            return []
        L, K = self.n_layers, self.branch_depth
        return list(range(L - K, L)) if self.variant.branches_on_top else list(range(K))

    def shared_layers(self) -> list[int]:
        branched = set(self.branch_layers())
        return [i for i in range(self.n_layers) if i not in branched]

    def mixer_layout(self) -> dict[int, list[str]]:
        """Layer index -> submodule names of the mixer applied after that branch layer."""
        layers = self.branch_layers()
        if not layers:
            return {}
        v = self.variant
        langs = list(self.languages)
        if v in (StructureVariant.NO_MIXERS_SINGLE, StructureVariant.NO_MIXERS_ALL):
            return {}
        if v is StructureVariant.NO_INNER_MIXERS:
            return {layers[-1]: [OUTER]}
        out = {i: list(langs) for i in layers[:-1]}
        if v is not StructureVariant.BRANCHES_AT_TOP_MULTI:
            out[layers[-1]] = [OUTER]
        return out

    def head_names(self) -> list[str]:
        if self.variant is StructureVariant.BRANCHES_AT_TOP_MULTI and self.branch_layers():
            return list(self.languages)
        return []


def block_parameter_count(d: int, d_ff: int) -> int:
    return 4 * d * d + 2 * d * d_ff + d_ff + d + 4 * d


def analytic_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; kept independent of module construction."""
    d, C = config.d_model, config.n_classes
    block = block_parameter_count(d, config.d_ff)
    head = d * C + C + (d * d + d if config.pooler else 0)
    embed = (config.vocab_size + config.max_len + config.n_features) * d
    total = embed + config.n_layers * block + head + 2 * d
    n_branch = len(config.branch_layers())
    total += (config.n_supervised - 1) * n_branch * block
    total += sum(len(subs) for subs in config.mixer_layout().values()) * config.max_len
    n_heads = len(config.head_names())
    if n_heads:
        total += (n_heads - 1) * head
    return total


# -- mixer ------------------------------------------------------------------------------
class MixerSubmodule(Module):
    def __init__(self, max_len: int):
        super().__init__()
        self.v = self.add_param("v", np.zeros(max_len, dtype=DTYPE))


def _stack_inputs(inputs: Sequence[Tensor], pad_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    shapes = {x.shape for x in inputs}
    if len(shapes) != 1:
        raise ShapeError(f"mixer inputs must share one shape, got {sorted(shapes)}")
    stacked = T.stack(inputs, axis=1)  # [N, N_sp, n, d]
    if pad_mask is None:
        return stacked, stacked
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(DTYPE)[:, None, :, None]
    return stacked, stacked * T.Tensor(keep)


def mixing_weights(v: Tensor, masked: Tensor) -> Tensor:
    """Softmax over the language axis of the per-feature scores ``v . H``: [N, N_sp, d]."""
    n = masked.shape[2]
    if n > v.shape[0]:
        raise ShapeError(f"sequence length {n} exceeds mixer vector length {v.shape[0]}")
    # positions past the batch length are padding, so slicing v equals zero-padding H
    scores = T.matmul(T.swapaxes(masked, -1, -2), v[:n].reshape(n, 1))  # [N, N_sp, d, 1]
    N, L, d, _ = scores.shape
    return T.softmax(scores.reshape(N, L, d), axis=1)


def _combine(stacked: Tensor, w: Tensor) -> Tensor:
    N, L, d = w.shape
    return T.tsum(stacked * w.reshape(N, L, 1, d), axis=1)


def mixer_submodule_forward(
    sub: MixerSubmodule | Tensor,
    inputs: Sequence[Tensor],
    pad_mask: np.ndarray | None = None,
    n_inputs: int | None = None,
) -> Tensor:
    """Mix branch representations feature-wise.

    ``inputs`` are N_sp tensors of shape [n, d] or [N, n, d].  Returns the same shape.
    """
    v = sub.v if isinstance(sub, MixerSubmodule) else sub
    if n_inputs is not None and len(inputs) != n_inputs:
        raise ContractError(f"mixer expects {n_inputs} inputs, got {len(inputs)}")
    unbatched = inputs[0].ndim == 2
    if unbatched:
        inputs = [x.reshape(1, *x.shape) for x in inputs]
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask)[None]
    stacked, masked = _stack_inputs(inputs, pad_mask)
    out = _combine(stacked, mixing_weights(v, masked))
    return out.reshape(*out.shape[1:]) if unbatched else out


class Mixer(Module):
    """N_sp submodules for an inner-mixer, one (named ``out``) for the outer-mixer."""

    def __init__(self, names: Sequence[str], max_len: int, n_inputs: int):
        super().__init__()
        self.names = list(names)
        self.n_inputs = n_inputs
        self.subs = {name: self.add_child(name, MixerSubmodule(max_len)) for name in self.names}

    @property
    def is_outer(self) -> bool:
        return self.names == [OUTER]

    def __call__(self, inputs: Sequence[Tensor], pad_mask: np.ndarray,
                 stopped: Sequence[str] = ()) -> dict[str, Tensor]:
        """Outputs per submodule; submodules listed in ``stopped`` run without a graph."""
        if len(inputs) != self.n_inputs:
            raise ContractError(f"mixer expects {self.n_inputs} inputs, got {len(inputs)}")
        stacked, masked = _stack_inputs(inputs, pad_mask)
        out = {}
        for name, sub in self.subs.items():
            if name in stopped:
                with T.no_grad():
                    out[name] = _combine(stacked, mixing_weights(sub.v, masked))
            else:
                out[name] = _combine(stacked, mixing_weights(sub.v, masked))
        return out


# -- model ------------------------------------------------------------------------------
class _Stack(Module):
    """Numbered children (layer index or language name)."""


class MblmModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.embed = self.add_child(
            "embed", EmbeddingLayer(c.vocab_size, c.max_len, c.d_model, c.n_features, rng, c.embed_std)
        )

        def new_block() -> TransformerBlock:
            return TransformerBlock(c.d_model, c.n_heads, c.d_ff, rng, c.dropout)

        self.branch_layers = c.branch_layers()
        self.shared_layers = c.shared_layers()
        self.branches: dict[str, dict[int, TransformerBlock]] = {}
        if self.branch_layers:
            branch_root = self.add_child("branch", _Stack())
            for lang in c.languages:
                layer_root = branch_root.add_child(lang, _Stack()).add_child("layer", _Stack())
                self.branches[lang] = {i: layer_root.add_child(str(i), new_block()) for i in self.branch_layers}
        self.mixers: dict[int, Mixer] = {}
        layout = c.mixer_layout()
        if layout:
            mixer_root = self.add_child("mixer", _Stack())
            for i, names in layout.items():
                self.mixers[i] = mixer_root.add_child(str(i), Mixer(names, c.max_len, c.n_supervised))
        self.shared: dict[int, TransformerBlock] = {}
        if self.shared_layers:
            shared_root = self.add_child("shared", _Stack())
            self.shared = {i: shared_root.add_child(str(i), new_block()) for i in self.shared_layers}
        self.final_norm = self.add_child("final_norm", LayerNorm(c.d_model))
        head_names = c.head_names()
        if head_names:
            head_root = self.add_child("head", _Stack())
            self.heads = {
                lang: head_root.add_child(lang, ClassifierHead(c.d_model, c.n_classes, rng, c.pooler))
                for lang in head_names
            }
            self.head = None
        else:
            self.head = self.add_child("head", ClassifierHead(c.d_model, c.n_classes, rng, c.pooler))
            self.heads = {}

    @property
    def variant(self) -> StructureVariant:
        return self.config.variant

    def language_index(self, language: str) -> int | None:
        try:
            return self.config.languages.index(language)
        except ValueError:
            return None

    # -- forward ---------------------------------------------------------------
    def __call__(self, batch: Batch, mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
        return mblm_forward(self, batch, mode, rng)

    def _run_shared(self, h: Tensor, layers: Sequence[int], pad: np.ndarray, rng) -> Tensor:
        for i in layers:
            h = self.shared[i](h, pad, rng)
        return h

    def _run_branches(self, h: Tensor, k: int | None, mode: str, pad: np.ndarray, rng) -> Tensor | list[Tensor]:
        """Branch region; returns the single mixed/selected output, or per-branch outputs."""
        c, v = self.config, self.variant
        langs = list(c.languages)
        if v in (StructureVariant.NO_MIXERS_SINGLE, StructureVariant.NO_MIXERS_ALL):
            if mode == "train" or (v is StructureVariant.NO_MIXERS_SINGLE and k is not None):
                for i in self.branch_layers:
                    h = self.branches[langs[k]][i](h, pad, rng)
                return h
            outs = []
            for lang in langs:
                x = h
                for i in self.branch_layers:
                    x = self.branches[lang][i](x, pad, rng)
                outs.append(x)
            return T.mean(T.stack(outs, axis=0), axis=0)

        stop = mode == "train" and v.detaches
        stopped = [lang for j, lang in enumerate(langs) if stop and j != k]
        states = {lang: h for lang in langs}
        for i in self.branch_layers:
            tilde = []
            for lang in langs:
                block = self.branches[lang][i]
                if lang in stopped:
                    # detach(f(x)): values kept, graph dropped
                    with T.no_grad():
                        tilde.append(block(states[lang], pad, rng))
                else:
                    tilde.append(block(states[lang], pad, rng))
            mixer = self.mixers.get(i)
            if mixer is None:
                states = dict(zip(langs, tilde))
            elif mixer.is_outer:
                return mixer(tilde, pad)[OUTER]
            else:
                states = mixer(tilde, pad, stopped)
        return [states[lang] for lang in langs]

    def _logits(self, h: Tensor | list[Tensor], k: int | None, mode: str) -> Tensor:
        if isinstance(h, Tensor):
            return classify(self.final_norm(h), self.head)
        langs = list(self.config.languages)
        if k is not None:
            return classify(self.final_norm(h[k]), self.heads[langs[k]])
        per_head = [classify(self.final_norm(x), self.heads[lang]) for lang, x in zip(langs, h)]
        return T.mean(T.stack(per_head, axis=0), axis=0)


def mblm_forward(model: MblmModel, batch: Batch, mode: str = "infer",
                 rng: np.random.Generator | None = None) -> Tensor:
    """Logits [N, C] for one single-language batch.

    ``mode="train"`` applies the detach rule for the batch language; ``"infer"`` never
    detaches.  Training on a language without a branch is a contract error for every
    variant that has branches.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    k = model.language_index(batch.language)
    if mode == "train" and k is None and model.branch_layers:
        raise ContractError(
            f"cannot train on language {batch.language!r}: it is not a supervised language "
            f"{list(model.config.languages)}"
        )
    if mode != "train":
        rng = None
    pad = batch.pad_mask
    h = model.embed(batch)
    if not model.branch_layers:
        h = model._run_shared(h, model.shared_layers, pad, rng)
        return model._logits(h, k, mode)
    if model.variant.branches_on_top:
        h = model._run_shared(h, model.shared_layers, pad, rng)
        return model._logits(model._run_branches(h, k, mode, pad, rng), k, mode)
    h = model._run_branches(h, k, mode, pad, rng)
    h = model._run_shared(h, model.shared_layers, pad, rng)
    return model._logits(h, k, mode)


variant_forward = mblm_forward


def predict_logits(model: MblmModel, batch: Batch) -> np.ndarray:
    with T.no_grad():
        return model(batch, "infer").data


def ensemble_logits(models: Sequence[MblmModel], batch: Batch) -> Tensor:
    """Arithmetic mean of member logits."""
    if len(models) < 2:
        raise ConfigError(f"an ensemble needs at least 2 models, got {len(models)}")
    classes = {m.config.n_classes for m in models}
    if len(classes) != 1:
        raise ConfigError(f"ensemble members disagree on class count: {sorted(classes)}")
    return T.mean(T.stack([m(batch, "infer") for m in models], axis=0), axis=0)


def init_from_base(base: MblmModel, config: ModelConfig) -> MblmModel:
    """Build a branched model whose branches are copies of the base model's layers.

    Shared layers, embedding, final norm and head(s) take the base values; mixer vectors
    start at zero, so every mixer averages uniformly and the new model reproduces the
    base model's logits.
    """
    bc = base.config
    if base.branch_layers:
        raise ConfigError("the base model must be a standard (unbranched) model")
    config.validate()
    for name in ("n_layers", "d_model", "n_heads", "d_ff", "n_classes", "vocab_size", "max_len",
                 "n_features", "pooler"):
        if getattr(bc, name) != getattr(config, name):
            raise ConfigError(f"base/config mismatch on {name}: {getattr(bc, name)} vs {getattr(config, name)}")
    model = MblmModel(config)
    src = base.state_dict()
    state = {}
    for name in model.state_dict():
        parts = name.split(".")
        if parts[0] == "branch":
            # branch.{lang}.layer.{i}.rest -> shared.{i}.rest
            key = ".".join(["shared", *parts[3:]])
        elif parts[0] == "mixer":
            state[name] = np.zeros(config.max_len, dtype=DTYPE)
            continue
        elif parts[0] == "head" and model.heads:
            key = ".".join(["head", *parts[2:]])
        else:
            key = name
        state[name] = src[key].copy()
    model.load_state_dict(state)
    return model


def copy_model(model: MblmModel) -> MblmModel:
    out = MblmModel(model.config)
    out.load_state_dict(model.state_dict())
    return out


def gradient_buffers(model: MblmModel) -> dict[str, np.ndarray]:
    """Gradient per parameter name; parameters the loss never reached read as zeros."""
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE))
        for name, p in model.named_parameters()
    }


def expected_gradient_support(config: ModelConfig, language: str) -> set[str]:
    """Parameter-name prefixes that a training step on ``language`` may update.

    Derived from the graph structure alone, for comparison with observed gradients.
    """
    langs = list(config.languages)
    if language not in langs:
        raise ContractError(f"{language!r} is not a supervised language")
    v = config.variant
    support = {"embed.", "final_norm.", "head."}
    support |= {f"shared.{i}." for i in config.shared_layers()}
    trained = langs if not v.detaches else [language]
    if v in (StructureVariant.NO_MIXERS_SINGLE, StructureVariant.NO_MIXERS_ALL):
        trained = [language]
    support |= {f"branch.{lang}." for lang in trained}
    for i, names in config.mixer_layout().items():
        for name in names:
            if name == OUTER or name in trained:
                support.add(f"mixer.{i}.{name}.")
    if config.head_names():
        support.discard("head.")
        support |= {f"head.{lang}." for lang in trained}
    return support


def in_support(name: str, support: set[str]) -> bool:
    return any(name.startswith(prefix) for prefix in support)


__all__ = [
    "OUTER",
    "StructureVariant",
    "ModelConfig",
    "MixerSubmodule",
    "Mixer",
    "MblmModel",
    "analytic_parameter_count",
    "block_parameter_count",
    "copy_model",
    "ensemble_logits",
    "expected_gradient_support",
    "gradient_buffers",
    "in_support",
    "init_from_base",
    "mblm_forward",
    "mixer_submodule_forward",
    "mixing_weights",
    "predict_logits",
    "variant_forward",
]
