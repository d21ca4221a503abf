"""Experiment driver: config files, run directories, resumable per-seed runs and reports.

Layout of an output directory::

    data/bundle.jsonl                 generated dataset (header record + examples)
    substrate/seed_<s>.ckpt           pre-trained standard base model for student seed s
    teachers/<lang>.ckpt              monolingual teachers
    runs/<method>/seed_<s>/           config.json, state.ckpt, history.jsonl, epochs.jsonl,
                                      model.ckpt, metrics.tsv (written last: marks completion)
    reports/                          aligned-text and TSV tables, sweep CSV
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_container, load_model, save_container, save_model
from .distill import KD_MODES, MODES, Scores, Trainer, TrainPlan, evaluate
from .errors import ConfigError, DataError, MblmError
from .model import (
    MblmModel,
    ModelConfig,
    StructureVariant,
    analytic_parameter_count,
    ensemble_logits,
    init_from_base,
)
from .pretrain import PretrainPlan, pretrain_base
from .synth import DatasetBundle, TaskConfig, build_splits, load_bundle, save_bundle

log = logging.getLogger(__name__)


class OutputExists(MblmError):
    """Refusal to overwrite finished or partial outputs without --force / --resume."""


class RunInterrupted(MblmError):
    """Raised by the test hook that simulates a killed run."""


# -- config sections -------------------------------------------------------------------
@dataclass
class ModelSection:
    """Student architecture; vocabulary, length, classes and languages come from the data."""

    n_layers: int = 4
    branch_depth: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    variant: str = "mblm"
    dropout: float = 0.0
    embed_std: float = 0.1
    pooler: bool = False


@dataclass
class TeacherSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    epochs: int = 6
    lr: float = 5e-4
    batch_size: int = 32
    pretrain_steps: int = 1500
    seed: int = 77


@dataclass
class RunSection:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    depths: tuple[int, ...] = (0, 1, 2, 3, 4)
    timing_steps: int = 20
    timing_repeats: int = 5


SECTIONS = {
    "dataset": TaskConfig,
    "model": ModelSection,
    "train": TrainPlan,
    "pretrain": PretrainPlan,
    "teacher": TeacherSection,
    "run": RunSection,
}
# keys owned by other parts of the pipeline
_RESERVED = {"train": {"seed"}, "pretrain": {"seed"}}


def _coerce(section: str, key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            low = raw.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if type_name.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type_name}") from None


def _type_name(t) -> str:
    if isinstance(t, str):
        return t
    return t.__name__ if isinstance(t, type) else str(t)


def _build_section(name: str, values: dict[str, str]):
    cls = SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields or key in _RESERVED.get(name, ()):
            raise ConfigError(f"unknown key {key!r} in [{name}]; known: {sorted(set(fields) - _RESERVED.get(name, set()))}")
        kwargs[key] = _coerce(name, key, raw, _type_name(fields[key].type))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MblmError):
            raise
        raise ConfigError(f"[{name}]: {exc}") from None


@dataclass
class ExperimentConfig:
    dataset: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainPlan = field(default_factory=TrainPlan)
    pretrain: PretrainPlan = field(default_factory=PretrainPlan)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> None:
        """Every check that can fail before compute, so bad configs never start a run."""
        self.dataset.validate()
        self.train.validate()
        StructureVariant.parse(self.model.variant)
        self.student_config()
        for lang in self.dataset.supervised:
            self.teacher_config(lang)
        for lang in self.train.languages:
            if lang not in self.dataset.supervised:
                raise ConfigError(f"[train] languages: {lang!r} is not a supervised language")
        if not self.run.seeds:
            raise ConfigError("[run] seeds must list at least one seed")
        if len(set(self.run.seeds)) != len(self.run.seeds):
            raise ConfigError(f"[run] seeds contain duplicates: {self.run.seeds}")
        bad = [k for k in self.run.depths if not 0 <= k <= self.model.n_layers]
        if bad:
            raise ConfigError(f"[run] depths {bad} outside [0, {self.model.n_layers}]")
        if self.run.timing_steps < 1 or self.run.timing_repeats < 1:
            raise ConfigError("[run] timing_steps and timing_repeats must be >= 1")

    def student_config(self, variant: str | StructureVariant | None = None,
                       branch_depth: int | None = None) -> ModelConfig:
        m, d = self.model, self.dataset
        v = StructureVariant.parse(variant if variant is not None else m.variant)
        k = m.branch_depth if branch_depth is None else branch_depth
        return ModelConfig(
            n_layers=m.n_layers,
            branch_depth=k if v.has_branches else 0,
            d_model=m.d_model,
            n_heads=m.n_heads,
            d_ff=m.d_ff,
            languages=tuple(d.supervised),
            n_classes=d.n_classes,
            vocab_size=d.vocab_size,
            max_len=d.seq_len,
            variant=v,
            tau=self.train.tau,
            dropout=m.dropout,
            pooler=m.pooler,
            embed_std=m.embed_std,
        )

    def base_config(self) -> ModelConfig:
        return self.student_config(StructureVariant.STANDARD)

    def teacher_config(self, language: str) -> ModelConfig:
        t, d = self.teacher, self.dataset
        return ModelConfig(
            n_layers=t.n_layers,
            branch_depth=0,
            d_model=t.d_model,
            n_heads=t.n_heads,
            d_ff=t.d_ff,
            languages=(language,),
            n_classes=d.n_classes,
            vocab_size=d.vocab_size,
            max_len=d.seq_len,
            variant=StructureVariant.STANDARD,
            tau=self.train.tau,
        )

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()
                         if k not in _RESERVED.get(name, ())}
        return out

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                if isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Parse an INI config; absent sections and keys keep their defaults."""
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{name}]; known: {list(SECTIONS)}")
            sections[name] = dict(parser[name])
    cfg = ExperimentConfig(**{name: _build_section(name, sections.get(name, {})) for name in SECTIONS})
    cfg.validate()
    return cfg


def parse_seeds(seed: int | None, seeds: str | None, default: Sequence[int]) -> list[int]:
    if seed is not None and seeds:
        raise ConfigError("pass either --seed or --seeds, not both")
    if seed is not None:
        return [seed]
    if seeds:
        try:
            out = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {seeds!r}") from None
        if not out or len(set(out)) != len(out):
            raise ConfigError(f"--seeds must be a non-empty list of distinct integers, got {seeds!r}")
        return out
    return list(default)


# -- workspace -------------------------------------------------------------------------
@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data" / "bundle.jsonl"

    def substrate(self, seed: int) -> Path:
        return self.root / "substrate" / f"seed_{seed}.ckpt"

    def teacher(self, language: str) -> Path:
        return self.root / "teachers" / f"{language}.ckpt"

    def run_dir(self, method: str, seed: int) -> Path:
        return self.root / "runs" / method / f"seed_{seed}"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def method_name(mode: str, variant: str | StructureVariant, branch_depth: int) -> str:
    v = StructureVariant.parse(variant)
    name = f"{mode}-{v.value}"
    return f"{name}-k{branch_depth}" if v.has_branches else name


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# -- data, substrate, teachers ---------------------------------------------------------
def generate(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> Path:
    if ws.data.exists() and not force:
        raise OutputExists(f"{ws.data} already exists; pass --force to regenerate")
    bundle = build_splits(cfg.dataset)
    ws.data.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, ws.data)
    log.info("wrote %s (sha256 %s)", ws.data, file_sha256(ws.data)[:12])
    return ws.data


def load_dataset(cfg: ExperimentConfig, ws: Workspace) -> DatasetBundle:
    if not ws.data.exists():
        raise DataError(f"no dataset at {ws.data}; run `mblm generate` with the same --config/--out first")
    bundle = load_bundle(ws.data)
    if bundle.config.to_dict() != cfg.dataset.to_dict():
        raise ConfigError(f"{ws.data} was generated from a different [dataset] section; regenerate with --force")
    return bundle


def _substrate_key(cfg: ExperimentConfig, seed: int) -> str:
    return stable_hash({"dataset": cfg.dataset.to_dict(), "base": cfg.base_config().to_dict(),
                        "pretrain": dataclasses.asdict(cfg.pretrain), "seed": seed})


def pretrain(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, seed: int,
             force: bool = False) -> MblmModel:
    """Pre-trained standard base model for student seed ``seed`` (cached on disk)."""
    path, key = ws.substrate(seed), _substrate_key(cfg, seed)
    if path.exists() and not force:
        arrays, doc = load_container(path)
        if doc["meta"].get("key") != key:
            raise ConfigError(f"{path} was built from a different config; rerun `mblm pretrain --force`")
        return load_model(path)
    base = MblmModel(cfg.base_config(), seed=seed)
    losses = pretrain_base(base, bundle, dataclasses.replace(cfg.pretrain, seed=seed))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, base, {"key": key, "seed": seed, "final_loss": float(np.mean(losses[-50:])) if losses else None})
    return base


def _teacher_key(cfg: ExperimentConfig, language: str) -> str:
    return stable_hash({"dataset": cfg.dataset.to_dict(), "teacher": dataclasses.asdict(cfg.teacher),
                        "pretrain": dataclasses.asdict(cfg.pretrain), "language": language})


def train_teachers(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, force: bool = False,
                   languages: Sequence[str] | None = None) -> dict[str, float]:
    """Fine-tune one monolingual teacher per supervised language; returns dev accuracy."""
    t = cfg.teacher
    todo = [l for l in (languages or bundle.supervised) if force or not ws.teacher(l).exists()]
    out = {}
    if not todo:
        return out
    # one pre-trained substrate for all teachers, same recipe as the students'
    sub_cfg = cfg.teacher_config(bundle.supervised[0]).replace(languages=tuple(bundle.supervised))
    substrate = MblmModel(sub_cfg, seed=t.seed)
    pretrain_base(substrate, bundle, dataclasses.replace(cfg.pretrain, steps=t.pretrain_steps, seed=t.seed))
    shared = {k: v for k, v in substrate.state_dict().items() if not k.startswith("head")}
    for i, lang in enumerate(todo):
        teacher = MblmModel(cfg.teacher_config(lang), seed=t.seed + 1 + i)
        teacher.load_state_dict({**teacher.state_dict(), **shared})
        plan = TrainPlan(mode="finetune", lr=t.lr, epochs=t.epochs, batch_size=t.batch_size,
                         seed=t.seed, languages=(lang,), select_on="supervised", tau=cfg.train.tau)
        Trainer(teacher, bundle, plan).run()
        dev = evaluate(teacher, bundle, "dev", languages=[lang]).per_language[lang]
        ws.teacher(lang).parent.mkdir(parents=True, exist_ok=True)
        save_model(ws.teacher(lang), teacher, {"key": _teacher_key(cfg, lang), "dev_accuracy": dev})
        log.info("teacher %s: dev accuracy %.4f", lang, dev)
        out[lang] = dev
    return out


def load_teachers(cfg: ExperimentConfig, ws: Workspace, languages: Sequence[str]) -> dict[str, MblmModel]:
    missing = [l for l in languages if not ws.teacher(l).exists()]
    if missing:
        raise DataError(f"missing teacher checkpoint(s) for language(s) {missing} under {ws.root / 'teachers'}; "
                        "run `mblm train-teacher` first")
    teachers = {}
    for lang in languages:
        _, doc = load_container(ws.teacher(lang))
        if doc["meta"].get("key") != _teacher_key(cfg, lang):
            raise ConfigError(f"teacher {lang!r} was trained from a different config; rerun `mblm train-teacher --force`")
        teachers[lang] = load_model(ws.teacher(lang))
    return teachers


# -- runs ------------------------------------------------------------------------------
METRICS_HEADER = "language\tsplit\tmetric\tvalue\n"


def write_metrics(path: Path, rows: Sequence[tuple[str, str, str, float]]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(METRICS_HEADER + "".join(f"{l}\t{s}\t{m}\t{v!r}\n" for l, s, m, v in rows))
    tmp.replace(path)


def read_metrics(path: Path) -> list[tuple[str, str, str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] + "\n" != METRICS_HEADER:
        raise DataError(f"{path}: not a metrics file")
    rows = []
    for line in lines[1:]:
        lang, split, metric, value = line.split("\t")
        rows.append((lang, split, metric, float(value)))
    return rows


@dataclass
class RunSpec:
    mode: str
    variant: StructureVariant
    branch_depth: int

    @property
    def name(self) -> str:
        return method_name(self.mode, self.variant, self.branch_depth)


def make_spec(cfg: ExperimentConfig, mode: str | None = None, variant: str | None = None,
              branch_depth: int | None = None) -> RunSpec:
    mode = mode or cfg.train.mode
    if mode not in MODES or mode == "finetune":
        raise ConfigError(f"student runs use multikd, monokd or multitrain, got {mode!r}")
    mc = cfg.student_config(variant, branch_depth)
    return RunSpec(mode, mc.variant, mc.branch_depth)


def run_seed(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, spec: RunSpec, seed: int,
             resume: bool = False, force: bool = False,
             stop_after_epochs: int | None = None) -> Path:
    """Train one student for one seed; returns its run directory.

    Finished runs are reused unless ``force``.  A partial run needs ``resume`` (continue
    from the last epoch checkpoint) or ``force`` (start over).
    """
    rd = ws.run_dir(spec.name, seed)
    metrics_path, state_path = rd / "metrics.tsv", rd / "state.ckpt"
    if force and rd.exists():
        shutil.rmtree(rd)
    mc = cfg.student_config(spec.variant, spec.branch_depth)
    plan = cfg.train.replace(mode=spec.mode, seed=seed)
    if spec.mode == "monokd" and not plan.languages:
        plan = plan.replace(languages=(bundle.supervised[0],))
    # everything that determines the numbers of this run, and nothing else
    resolved = {"method": spec.name, "seed": seed, "dataset": cfg.dataset.to_dict(),
                "pretrain": dataclasses.asdict(cfg.pretrain), "model": mc.to_dict(), "plan": plan.to_dict(),
                "teacher": dataclasses.asdict(cfg.teacher) if spec.mode in KD_MODES else None}
    run_hash = stable_hash(resolved)
    if metrics_path.exists():
        stored = json.loads((rd / "config.json").read_text()).get("run_hash")
        if stored != run_hash:
            raise ConfigError(f"{rd} finished under a different config; pass --force to retrain")
        log.info("%s seed %d already finished", spec.name, seed)
        return rd
    if state_path.exists() and not resume:
        raise OutputExists(f"{rd} holds a partial run; pass --resume to continue or --force to restart")
    teachers = load_teachers(cfg, ws, plan.languages or bundle.supervised) if spec.mode in KD_MODES else {}
    base = pretrain(cfg, ws, bundle, seed)
    student = init_from_base(base, mc)
    trainer = Trainer(student, bundle, plan, teachers)
    if state_path.exists():
        arrays, doc = load_container(state_path)
        if doc.get("run_hash") != run_hash:
            raise ConfigError(f"{state_path} belongs to a different config; use --force to restart")
        trainer.import_state(arrays, doc["trainer"])
        log.info("%s seed %d resumed at epoch %d", spec.name, seed, trainer.epoch)
    else:
        _write_json(rd / "config.json", {**resolved, "run_hash": run_hash, "config": cfg.to_dict(),
                                         "config_hash": cfg.config_hash()})

    def checkpoint(tr: Trainer) -> None:
        arrays, doc = tr.export_state()
        save_container(state_path, arrays, {"trainer": doc, "run_hash": run_hash})
        if stop_after_epochs is not None and tr.epoch >= stop_after_epochs:
            raise RunInterrupted(f"stopped after epoch {tr.epoch}")

    t0 = time.perf_counter()
    result = trainer.run(checkpoint)
    scores = evaluate(student, bundle, "test")
    dev = result.dev_scores[result.best_epoch] if result.dev_scores else {}
    save_model(rd / "model.ckpt", student, {"run_hash": run_hash, "best_epoch": result.best_epoch})
    _write_jsonl(rd / "history.jsonl", result.history)
    _write_jsonl(rd / "epochs.jsonl", result.dev_scores)
    rows = [(l, "test", scores.metric, v) for l, v in scores.per_language.items()]
    rows += [(l, "dev", scores.metric, dev[l]) for l in scores.per_language if l in dev]
    write_metrics(metrics_path, rows)
    log.info("%s seed %d: S %.4f Z %.4f A %.4f (best epoch %d, %.0fs)", spec.name, seed,
             scores.avg_s, scores.avg_z, scores.avg_a, result.best_epoch, time.perf_counter() - t0)
    return rd


def run_method(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, spec: RunSpec,
               seeds: Sequence[int], resume: bool = False, force: bool = False) -> list[Path]:
    return [run_seed(cfg, ws, bundle, spec, s, resume=resume, force=force) for s in seeds]


# -- reports ---------------------------------------------------------------------------
AGGREGATES = ("AVG(S)", "AVG(Z)", "AVG(A)")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


@dataclass
class ReportTable:
    """method -> seed -> language -> score.  Aggregates are always recomputed from cells."""

    supervised: list[str]
    zero_shot: list[str]
    split: str = "test"
    cells: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)
    extras: dict[str, dict[str, str]] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def languages(self) -> list[str]:
        return self.supervised + self.zero_shot

    @property
    def methods(self) -> list[str]:
        return list(self.cells)

    def add(self, method: str, seed: int, scores: dict[str, float]) -> None:
        self.cells.setdefault(method, {})[seed] = dict(scores)

    def seed_aggregate(self, method: str, seed: int, which: str) -> float:
        row = self.cells[method][seed]
        langs = {"AVG(S)": self.supervised, "AVG(Z)": self.zero_shot, "AVG(A)": self.languages}[which]
        return float(np.mean([row[l] for l in langs]))

    def stat(self, method: str, column: str) -> tuple[float, float]:
        seeds = sorted(self.cells[method])
        if column in AGGREGATES:
            vals = [self.seed_aggregate(method, s, column) for s in seeds]
        else:
            vals = [self.cells[method][s][column] for s in seeds]
        return _mean_std(vals)

    def to_tsv(self) -> str:
        out = [f"# config_hash={self.config_hash} split={self.split}", "method\tcolumn\tmean\tstd\tn_seeds"]
        for m in self.methods:
            n = len(self.cells[m])
            for col in self.languages + list(AGGREGATES):
                mean, std = self.stat(m, col)
                out.append(f"{self.labels.get(m, m)}\t{col}\t{mean!r}\t{std!r}\t{n}")
        return "\n".join(out) + "\n"

    def render(self, scale: float = 100.0) -> str:
        extra_cols = sorted({k for e in self.extras.values() for k in e})
        header = ["method", "n"] + self.languages + [f"{a} ±" for a in AGGREGATES] + extra_cols
        rows = []
        for m in self.methods:
            row = [self.labels.get(m, m), str(len(self.cells[m]))]
            row += [f"{scale * self.stat(m, l)[0]:.2f}" for l in self.languages]
            for a in AGGREGATES:
                mean, std = self.stat(m, a)
                row.append(f"{scale * mean:.2f} ± {scale * std:.2f}")
            row += [self.extras.get(m, {}).get(c, "") for c in extra_cols]
            rows.append(row)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [f"config {self.config_hash}, {self.split} split, mean over seeds (std across seeds)",
                 fmt(header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        return "\n".join(lines + [fmt(r) for r in rows]) + "\n"

    def write(self, directory: Path, stem: str) -> tuple[Path, Path]:
        directory.mkdir(parents=True, exist_ok=True)
        tsv, txt = directory / f"{stem}.tsv", directory / f"{stem}.txt"
        tsv.write_text(self.to_tsv())
        txt.write_text(self.render())
        return tsv, txt


def collect_report(cfg: ExperimentConfig, ws: Workspace, methods: Sequence[str] | None = None,
                   seeds: Sequence[int] | None = None, split: str = "test") -> ReportTable:
    """Build a table from finished runs' metrics files."""
    table = ReportTable(cfg.dataset.supervised, cfg.dataset.zero_shot, split, config_hash=cfg.config_hash())
    runs_root = ws.root / "runs"
    names = list(methods) if methods is not None else sorted(p.name for p in runs_root.glob("*") if p.is_dir())
    for name in names:
        for seed_dir in sorted((runs_root / name).glob("seed_*"), key=lambda p: int(p.name[5:])):
            seed = int(seed_dir.name[5:])
            if seeds is not None and seed not in seeds:
                continue
            path = seed_dir / "metrics.tsv"
            if not path.exists():
                continue
            row = {l: v for l, s, _, v in read_metrics(path) if s == split}
            missing = [l for l in table.languages if l not in row]
            if missing:
                raise DataError(f"{path} lacks {split} scores for {missing}")
            table.add(name, seed, row)
    if methods is not None:
        absent = [m for m in methods if m not in table.cells]
        if absent:
            raise DataError(f"no finished runs for {absent} under {runs_root}")
    return table


# -- sweeps ----------------------------------------------------------------------------
def depth_sweep(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, depths: Sequence[int],
                seeds: Sequence[int], resume: bool = False, force: bool = False) -> tuple[ReportTable, Path]:
    """Multilingual fine-tuning (no distillation) for each branch depth; K=0 is the standard model."""
    bad = [k for k in depths if not 0 <= k <= cfg.model.n_layers]
    if bad:
        raise ConfigError(f"depths {bad} outside [0, {cfg.model.n_layers}]")
    specs = {}
    for k in depths:
        spec = make_spec(cfg, "multitrain", "standard" if k == 0 else "mblm", k)
        run_method(cfg, ws, bundle, spec, seeds, resume, force)
        specs[k] = spec.name
    table = collect_report(cfg, ws, list(specs.values()), seeds)
    table.labels = {name: f"K={k}" for k, name in specs.items()}
    table.write(ws.reports, "depth_sweep")
    lines = ["K,n_seeds," + ",".join(f"{a}_mean,{a}_std" for a in ("avg_s", "avg_z", "avg_a"))]
    for k, name in specs.items():
        vals = []
        for a in AGGREGATES:
            vals.extend(table.stat(name, a))
        lines.append(f"{k},{len(table.cells[name])}," + ",".join(repr(v) for v in vals))
    csv_path = ws.reports / "depth_sweep.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    return table, csv_path


ABLATION_VARIANTS = (
    ("Mblm", StructureVariant.MBLM),
    ("NoInnerMixers", StructureVariant.NO_INNER_MIXERS),
    ("NoMixersSingle", StructureVariant.NO_MIXERS_SINGLE),
    ("NoMixersAll", StructureVariant.NO_MIXERS_ALL),
    ("NoDetach", StructureVariant.NO_DETACH),
    ("BranchesAtTop", StructureVariant.BRANCHES_AT_TOP),
    ("BranchesAtTopMultiClassifier", StructureVariant.BRANCHES_AT_TOP_MULTI),
    ("Standard", StructureVariant.STANDARD),
)


def ablate(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, seeds: Sequence[int],
           resume: bool = False, force: bool = False) -> ReportTable:
    """All structure variants under MultiKD, paired seeds (same substrate per seed)."""
    names, labels, extras = [], {}, {}
    for label, variant in ABLATION_VARIANTS:
        spec = make_spec(cfg, "multikd", variant.value)
        run_method(cfg, ws, bundle, spec, seeds, resume, force)
        names.append(spec.name)
        labels[spec.name] = label
        params = MblmModel(cfg.student_config(variant)).num_parameters()
        extras[spec.name] = {"params": str(params)}
        log.info("%s: %d parameters", label, params)
    table = collect_report(cfg, ws, names, seeds)
    table.labels, table.extras = labels, extras
    table.write(ws.reports, "ablation")
    return table


# -- efficiency ------------------------------------------------------------------------
@dataclass
class Efficiency:
    params: dict[str, int]
    analytic_mblm: int
    step_ms: dict[str, float]
    step_ms_std: dict[str, float]
    time_ratio: float
    time_ratio_std: float

    @property
    def param_ratio(self) -> dict[str, float]:
        return {k: v / self.params["Standard"] for k, v in self.params.items()}


def parameter_counts(cfg: ExperimentConfig) -> tuple[dict[str, int], int]:
    std = MblmModel(cfg.base_config(), seed=0)
    mc = cfg.student_config(StructureVariant.MBLM)
    mblm = MblmModel(mc, seed=0)
    ens = [MblmModel(cfg.base_config(), seed=s) for s in (0, 1)]
    counts = {"Standard": std.num_parameters(), "Mblm": mblm.num_parameters(),
              "Ens_2": sum(m.num_parameters() for m in ens)}
    return counts, analytic_parameter_count(mc)


def time_training_steps(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, seed: int,
                        steps: int, repeats: int,
                        clock: Callable[[], float] = time.perf_counter) -> tuple[dict[str, list[float]], list[float]]:
    """Wall-clock seconds per MultiKD step (teacher forward included), Standard vs Mblm.

    Blocks of ``steps`` alternate between the two models to share any drift in machine load.
    """
    teachers = load_teachers(cfg, ws, bundle.supervised)
    base = pretrain(cfg, ws, bundle, seed)
    trainers = {}
    for label, variant in (("Standard", StructureVariant.STANDARD), ("Mblm", StructureVariant.MBLM)):
        student = init_from_base(base, cfg.student_config(variant))
        trainers[label] = Trainer(student, bundle, cfg.train.replace(mode="multikd", seed=seed), teachers)
        for _ in range(3):
            trainers[label].train_step()
    per_step: dict[str, list[float]] = {k: [] for k in trainers}
    for _ in range(repeats):
        for label, tr in trainers.items():
            t0 = clock()
            for _ in range(steps):
                tr.train_step()
            per_step[label].append((clock() - t0) / steps)
    ratios = [m / s for m, s in zip(per_step["Mblm"], per_step["Standard"])]
    return per_step, ratios


def efficiency(cfg: ExperimentConfig, ws: Workspace, bundle: DatasetBundle, seeds: Sequence[int],
               train_missing: bool = True, resume: bool = False, force: bool = False) -> tuple[Efficiency, ReportTable]:
    counts, analytic = parameter_counts(cfg)
    per_step, ratios = time_training_steps(cfg, ws, bundle, seeds[0], cfg.run.timing_steps, cfg.run.timing_repeats)
    eff = Efficiency(
        counts, analytic,
        {k: 1e3 * float(np.mean(v)) for k, v in per_step.items()},
        {k: 1e3 * float(np.std(v)) for k, v in per_step.items()},
        float(np.mean(ratios)), float(np.std(ratios)),
    )
    std_spec, mblm_spec = make_spec(cfg, "multikd", "standard"), make_spec(cfg, "multikd", "mblm")
    if train_missing:
        for spec in (std_spec, mblm_spec):
            run_method(cfg, ws, bundle, spec, seeds, resume, force)
    table = ReportTable(cfg.dataset.supervised, cfg.dataset.zero_shot, config_hash=cfg.config_hash())
    have = collect_report(cfg, ws, None, seeds)
    for label, spec in (("Standard", std_spec), ("Mblm", mblm_spec)):
        if spec.name in have.cells:
            table.cells[label] = have.cells[spec.name]
    # Ens_2: average logits of two Standard students from neighbouring seeds
    done = sorted(have.cells.get(std_spec.name, {}))
    if len(done) >= 2:
        for i, seed in enumerate(done):
            other = done[(i + 1) % len(done)]
            pair = [load_model(ws.run_dir(std_spec.name, s) / "model.ckpt") for s in (seed, other)]
            scores = evaluate(lambda b: ensemble_logits(pair, b).data, bundle, "test")
            table.add("Ens_2", seed, scores.per_language)
    for label in table.methods:
        table.extras[label] = {
            "params": str(counts[label]),
            "params×": f"{eff.param_ratio[label]:.2f}",
        }
    for label in ("Standard", "Mblm"):
        if label in table.extras:
            table.extras[label]["step ms"] = f"{eff.step_ms[label]:.1f}"
    if "Mblm" in table.extras:
        table.extras["Mblm"]["time×"] = f"{eff.time_ratio:.2f} ± {eff.time_ratio_std:.2f}"
    table.write(ws.reports, "efficiency")
    lines = ["model\tparams\tparams_ratio\tstep_ms\tstep_ms_std\ttime_ratio\ttime_ratio_std"]
    for label, n in counts.items():
        ms = eff.step_ms.get(label, float("nan"))
        sd = eff.step_ms_std.get(label, float("nan"))
        tr, ts = ((eff.time_ratio, eff.time_ratio_std) if label == "Mblm"
                  else (1.0, 0.0) if label == "Standard" else (float("nan"), float("nan")))
        lines.append(f"{label}\t{n}\t{eff.param_ratio[label]!r}\t{ms:.3f}\t{sd:.3f}\t{tr:.4f}\t{ts:.4f}")
    (ws.reports / "efficiency_timing.tsv").write_text(
        f"# config_hash={cfg.config_hash()} analytic_mblm_params={analytic}\n" + "\n".join(lines) + "\n")
    return eff, table
