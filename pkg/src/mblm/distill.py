"""Teacher fine-tuning, multi-teacher distillation, baselines and evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .model import MblmModel, predict_logits
from .nn import AdamState, Batch, adam_step, cross_entropy
from .synth import BatchStream, DatasetBundle, Example, epoch_batches
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

MODES = ("multikd", "monokd", "multitrain", "finetune")
KD_MODES = ("multikd", "monokd")


# -- losses ----------------------------------------------------------------------------
def soften(logits, tau: float):
    """Row-wise softmax(logits / tau); accepts Tensors (tracked) or arrays."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if isinstance(logits, Tensor):
        return T.softmax(T.scale(logits, 1.0 / tau), axis=-1)
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def kd_loss(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """-(1/N) sum_i p_T(i) . log p_S(i), both softened by ``tau``; the teacher side is constant."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"teacher logits {t.shape} and student logits {student_logits.shape} differ")
    p_teacher = T.Tensor(soften(t, tau))
    log_p_student = T.log_softmax(T.scale(student_logits, 1.0 / tau), axis=-1)
    return T.scale(T.tsum(p_teacher * log_p_student), -1.0 / t.shape[0])


def entropy(probs: np.ndarray) -> float:
    """Mean row entropy (nats)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=-1).mean())


# -- plans -----------------------------------------------------------------------------
@dataclass
class TrainPlan:
    mode: str = "multikd"
    tau: float = 8.0
    lr: float = 3e-4
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    languages: tuple[str, ...] = ()
    warmup_steps: int = 0
    steps_per_epoch: int = 0
    select_on: str = "all"
    eval_batch_size: int = 256

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; choose from {MODES}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.mode == "monokd" and len(self.languages) > 1:
            raise ConfigError("MonoKD distills from exactly one teacher language")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, epochs and batch_size must be positive")
        if self.select_on not in ("all", "supervised", "last"):
            raise ConfigError(f"select_on must be all|supervised|last, got {self.select_on!r}")

    def replace(self, **changes) -> "TrainPlan":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["languages"] = list(self.languages)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainPlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**data)


class TeacherSet(dict):
    """language -> frozen monolingual teacher."""

    def logits(self, language: str, batch: Batch) -> np.ndarray:
        return predict_logits(self[language], batch)


# -- evaluation ------------------------------------------------------------------------
@dataclass
class Scores:
    metric: str
    per_language: dict[str, float]
    supervised: list[str]
    zero_shot: list[str]

    def _avg(self, langs: Sequence[str]) -> float:
        vals = [self.per_language[l] for l in langs if l in self.per_language]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def avg_s(self) -> float:
        return self._avg(self.supervised)

    @property
    def avg_z(self) -> float:
        return self._avg(self.zero_shot)

    @property
    def avg_a(self) -> float:
        return self._avg(list(self.supervised) + list(self.zero_shot))

    def as_dict(self) -> dict:
        return {**self.per_language, "AVG(S)": self.avg_s, "AVG(Z)": self.avg_z, "AVG(A)": self.avg_a}


def score_predictions(pred: np.ndarray, gold: np.ndarray, metric: str) -> float:
    if gold.size == 0:
        raise DataError("cannot score an empty split")
    if metric == "accuracy":
        return float(np.mean(pred == gold))
    if metric == "mae":
        return float(np.mean(np.abs(pred.astype(np.int64) - gold.astype(np.int64))))
    raise ConfigError(f"unknown metric {metric!r}; use accuracy or mae")


LogitsFn = Callable[[Batch], np.ndarray]


def _as_logits_fn(model) -> LogitsFn:
    if isinstance(model, MblmModel):
        return lambda batch: predict_logits(model, batch)
    if callable(model):
        return model
    raise ContractError(f"cannot evaluate object of type {type(model).__name__}")


def predict(model, examples: Sequence[Example], batch_size: int = 256) -> np.ndarray:
    fn = _as_logits_fn(model)
    return np.concatenate([fn(b).argmax(axis=-1) for b in epoch_batches(examples, batch_size)])


def evaluate(model, bundle: DatasetBundle, split: str = "test", metric: str = "accuracy",
             languages: Sequence[str] | None = None, batch_size: int = 256) -> Scores:
    """Per-language score plus supervised / zero-shot / all averages."""
    langs = list(languages) if languages is not None else [l.name for l in bundle.languages]
    per = {}
    for lang in langs:
        examples = bundle.split(lang, split)
        if not examples:
            raise DataError(f"empty {split} split for language {lang!r}")
        gold = np.array([ex.label for ex in examples])
        per[lang] = score_predictions(predict(model, examples, batch_size), gold, metric)
    return Scores(
        metric,
        per,
        [l for l in bundle.supervised if l in per],
        [l for l in bundle.zero_shot if l in per],
    )


# -- training --------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: MblmModel
    history: list[dict] = field(default_factory=list)
    dev_scores: list[dict] = field(default_factory=list)
    best_epoch: int = -1


class Trainer:
    """The shared sampling loop behind every training mode.

    Each iteration samples a language uniformly, draws its next batch, and takes one Adam
    step on the KD loss against that language's teacher (KD modes) or on cross-entropy
    with gold labels.  The whole loop state can be exported for epoch-level resume.
    """

    def __init__(self, model: MblmModel, bundle: DatasetBundle, plan: TrainPlan,
                 teachers: Mapping[str, MblmModel] | None = None):
        plan.validate()
        self.model, self.bundle, self.plan = model, bundle, plan
        self.languages = list(plan.languages or bundle.supervised)
        if not self.languages:
            raise ConfigError("no training languages")
        for lang in self.languages:
            if lang not in bundle.supervised:
                raise ConfigError(f"{lang!r} is not a supervised language of this dataset")
            if not bundle.split(lang, "train"):
                raise ConfigError(f"missing training data for supervised language {lang!r}")
        self.teachers = dict(teachers or {})
        if plan.mode in KD_MODES:
            missing = [l for l in self.languages if l not in self.teachers]
            if missing:
                raise ConfigError(f"missing teacher for language(s) {missing}")
            for lang in self.languages:
                if self.teachers[lang].config.n_classes != model.config.n_classes:
                    raise ConfigError(f"teacher {lang!r} class count differs from the student")
        self.params = dict(model.named_parameters())
        self.adam = AdamState(lr=plan.lr)
        seq = np.random.SeedSequence(plan.seed)
        lang_seed, drop_seed, *stream_seeds = seq.spawn(2 + len(self.languages))
        self.lang_rng = np.random.default_rng(lang_seed)
        self.drop_rng = np.random.default_rng(drop_seed)
        self.streams = {
            lang: BatchStream(bundle.split(lang, "train"), plan.batch_size, s)
            for lang, s in zip(self.languages, stream_seeds)
        }
        total = sum(len(bundle.split(l, "train")) for l in self.languages)
        self.steps_per_epoch = plan.steps_per_epoch or max(1, -(-total // plan.batch_size))
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.dev_scores: list[dict] = []
        self.best_score = -np.inf
        self.best_epoch = -1
        self.best_state: dict[str, np.ndarray] | None = None

    def current_lr(self) -> float:
        if self.plan.warmup_steps and self.step < self.plan.warmup_steps:
            return self.plan.lr * (self.step + 1) / self.plan.warmup_steps
        return self.plan.lr

    def loss_on(self, batch: Batch) -> Tensor:
        logits = self.model(batch, "train", self.drop_rng)
        if self.plan.mode in KD_MODES:
            with T.no_grad():
                teacher = self.teachers[batch.language](batch, "infer").data
            return kd_loss(teacher, logits, self.plan.tau)
        return cross_entropy(logits, batch.labels)

    def train_step(self) -> dict:
        lang = self.languages[int(self.lang_rng.integers(len(self.languages)))]
        batch = next(self.streams[lang])
        self.model.zero_grad()
        loss = self.loss_on(batch)
        loss.backward()
        self.adam.lr = self.current_lr()
        adam_step(self.params, self.adam)
        record = {"step": self.step, "language": lang, "loss": loss.item(), "lr": self.adam.lr}
        self.history.append(record)
        self.step += 1
        return record

    def select_score(self) -> float | None:
        if self.plan.select_on == "last":
            return None
        langs = None if self.plan.select_on == "all" else self.languages
        scores = evaluate(self.model, self.bundle, "dev", languages=langs, batch_size=self.plan.eval_batch_size)
        self.dev_scores.append({"epoch": self.epoch, **scores.as_dict()})
        return scores.avg_a

    def run_epoch(self) -> None:
        for _ in range(self.steps_per_epoch):
            self.train_step()
        score = self.select_score()
        if score is None or score > self.best_score:
            self.best_score = score if score is not None else self.best_score
            self.best_epoch = self.epoch
            self.best_state = self.model.state_dict()
        self.epoch += 1

    def run(self, on_epoch_end: Callable[["Trainer"], None] | None = None) -> TrainResult:
        while self.epoch < self.plan.epochs:
            self.run_epoch()
            log.info("epoch %d done (step %d, best epoch %d)", self.epoch, self.step, self.best_epoch)
            if on_epoch_end is not None:
                on_epoch_end(self)
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return TrainResult(self.model, self.history, self.dev_scores, self.best_epoch)

    # -- resume ----------------------------------------------------------------------
    def export_state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"~adam.m.{k}": v for k, v in self.adam.m.items()}
        arrays.update({f"~adam.v.{k}": v for k, v in self.adam.v.items()})
        if self.best_state is not None:
            arrays.update({f"~best.{k}": v for k, v in self.best_state.items()})
        arrays.update(self.model.state_dict())
        doc = {
            "plan": self.plan.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "lang_rng": self.lang_rng.bit_generator.state,
            "drop_rng": self.drop_rng.bit_generator.state,
            "streams": {l: s.get_state() for l, s in self.streams.items()},
            "history": self.history,
            "dev_scores": self.dev_scores,
            "best_score": None if not np.isfinite(self.best_score) else self.best_score,
            "best_epoch": self.best_epoch,
        }
        return arrays, doc

    def import_state(self, arrays: dict[str, np.ndarray], doc: dict) -> None:
        self.model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("~")})
        self.adam.m = {k[len("~adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("~adam.m.")}
        self.adam.v = {k[len("~adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("~adam.v.")}
        best = {k[len("~best."):]: v.copy() for k, v in arrays.items() if k.startswith("~best.")}
        self.best_state = best or None
        self.adam.step = doc["adam_step"]
        self.step, self.epoch = doc["step"], doc["epoch"]
        self.lang_rng.bit_generator.state = doc["lang_rng"]
        self.drop_rng.bit_generator.state = doc["drop_rng"]
        for lang, state in doc["streams"].items():
            self.streams[lang].set_state(state)
        self.history = list(doc["history"])
        self.dev_scores = list(doc["dev_scores"])
        self.best_score = -np.inf if doc["best_score"] is None else doc["best_score"]
        self.best_epoch = doc["best_epoch"]


def multikd_train(student: MblmModel, teachers: Mapping[str, MblmModel], bundle: DatasetBundle,
                  plan: TrainPlan) -> TrainResult:
    return Trainer(student, bundle, plan.replace(mode="multikd"), teachers).run()


def monokd_train(student: MblmModel, teacher: MblmModel, bundle: DatasetBundle, language: str,
                 plan: TrainPlan) -> TrainResult:
    return Trainer(student, bundle, plan.replace(mode="monokd", languages=(language,)), {language: teacher}).run()


def fine_tune(model: MblmModel, bundle: DatasetBundle, plan: TrainPlan) -> TrainResult:
    mode = plan.mode if plan.mode in ("multitrain", "finetune") else "multitrain"
    return Trainer(model, bundle, plan.replace(mode=mode)).run()
