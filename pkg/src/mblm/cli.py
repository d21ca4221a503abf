"""Command-line entry point: ``mblm <command> --config exp.ini --out runs/``.

Exit codes: 0 success, 1 refused (existing output), 2 config error, 3 data error,
4 contract error.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from . import harness as H
from .errors import MblmError

log = logging.getLogger("mblm")


def _guard(fn):
    """Map library errors to exit codes instead of tracebacks."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MblmError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def common(fn):
    fn = click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=Path("runs"),
                      show_default=True, help="Output directory.")(fn)
    fn = click.option("--config", "config", type=click.Path(path_type=Path), default=None,
                      help="INI file with [dataset] [model] [train] [pretrain] [teacher] [run] sections.")(fn)
    return fn


def seeded(fn):
    fn = click.option("--seeds", default=None, help="Comma-separated seeds, e.g. 1,2,3.")(fn)
    fn = click.option("--seed", type=int, default=None, help="A single seed.")(fn)
    return fn


def resumable(fn):
    fn = click.option("--resume", is_flag=True, help="Continue partial runs from their last epoch checkpoint.")(fn)
    fn = click.option("--force", is_flag=True, help="Discard existing outputs and recompute.")(fn)
    return fn


def _setup(config, out):
    cfg = H.load_config(config)
    return cfg, H.Workspace(out)


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def main(verbose: int) -> None:
    """Multi-branch multilingual distillation experiments on synthetic cipher languages."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")


@main.command()
@common
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@_guard
def generate(config, out, force):
    """Generate the synthetic multilingual dataset."""
    cfg, ws = _setup(config, out)
    path = H.generate(cfg, ws, force)
    click.echo(f"{path}\tsha256={H.file_sha256(path)}")


@main.command()
@common
@seeded
@click.option("--force", is_flag=True, help="Recompute existing substrates.")
@_guard
def pretrain(config, out, seed, seeds, force):
    """Pre-train the standard base model (one per student seed)."""
    cfg, ws = _setup(config, out)
    bundle = H.load_dataset(cfg, ws)
    for s in H.parse_seeds(seed, seeds, cfg.run.seeds):
        H.pretrain(cfg, ws, bundle, s, force)
        click.echo(str(ws.substrate(s)))


@main.command("train-teacher")
@common
@click.option("--language", "languages", multiple=True, help="Only these supervised languages (repeatable).")
@click.option("--force", is_flag=True, help="Retrain existing teachers.")
@_guard
def train_teacher(config, out, languages, force):
    """Fine-tune one monolingual teacher per supervised language."""
    cfg, ws = _setup(config, out)
    bundle = H.load_dataset(cfg, ws)
    unknown = [l for l in languages if l not in bundle.supervised]
    if unknown:
        raise H.ConfigError(f"--language {unknown} not among supervised languages {bundle.supervised}")
    trained = H.train_teachers(cfg, ws, bundle, force, languages or None)
    for lang in languages or bundle.supervised:
        note = f"dev={trained[lang]:.4f}" if lang in trained else "exists"
        click.echo(f"{ws.teacher(lang)}\t{note}")


@main.command()
@common
@seeded
@click.option("--variant", default=None, help="Structure variant (default from [model] variant).")
@click.option("--mode", default=None, type=click.Choice(["multikd", "monokd", "multitrain"]),
              help="Training mode (default from [train] mode).")
@resumable
@_guard
def run(config, out, seed, seeds, variant, mode, force, resume):
    """Train students for each seed and write per-language test metrics."""
    cfg, ws = _setup(config, out)
    spec = H.make_spec(cfg, mode, variant)
    seeds = H.parse_seeds(seed, seeds, cfg.run.seeds)
    bundle = H.load_dataset(cfg, ws)
    H.run_method(cfg, ws, bundle, spec, seeds, resume=resume, force=force)
    click.echo(H.collect_report(cfg, ws, [spec.name], seeds).render())


@main.command("depth-sweep")
@common
@seeded
@click.option("--depths", default=None, help="Comma-separated branch depths K (default from [run] depths).")
@resumable
@_guard
def depth_sweep(config, out, seed, seeds, depths, force, resume):
    """Multilingual fine-tuning across branch depths; K=0 is the standard model."""
    cfg, ws = _setup(config, out)
    seeds = H.parse_seeds(seed, seeds, cfg.run.seeds)
    if depths:
        try:
            ks = [int(k) for k in depths.split(",") if k.strip()]
        except ValueError:
            raise H.ConfigError(f"--depths expects comma-separated integers, got {depths!r}") from None
    else:
        ks = list(cfg.run.depths)
    bundle = H.load_dataset(cfg, ws)
    table, csv_path = H.depth_sweep(cfg, ws, bundle, ks, seeds, resume, force)
    click.echo(table.render())
    click.echo(str(csv_path))


@main.command()
@common
@seeded
@resumable
@_guard
def ablate(config, out, seed, seeds, force, resume):
    """Every structure variant under MultiKD with paired seeds."""
    cfg, ws = _setup(config, out)
    seeds = H.parse_seeds(seed, seeds, cfg.run.seeds)
    bundle = H.load_dataset(cfg, ws)
    click.echo(H.ablate(cfg, ws, bundle, seeds, resume, force).render())


@main.command()
@common
@seeded
@click.option("--train/--no-train", "train_missing", default=True,
              help="Train missing Standard/Mblm runs for the accuracy columns.")
@resumable
@_guard
def efficiency(config, out, seed, seeds, train_missing, force, resume):
    """Parameter counts and training step time of Mblm and Ens_2 relative to Standard."""
    cfg, ws = _setup(config, out)
    seeds = H.parse_seeds(seed, seeds, cfg.run.seeds)
    bundle = H.load_dataset(cfg, ws)
    eff, table = H.efficiency(cfg, ws, bundle, seeds, train_missing, resume, force)
    click.echo(table.render())
    click.echo(f"Mblm step time {eff.time_ratio:.3f} ± {eff.time_ratio_std:.3f} × Standard "
               f"({eff.step_ms['Mblm']:.1f} ms vs {eff.step_ms['Standard']:.1f} ms); "
               f"analytic Mblm params {eff.analytic_mblm}")


@main.command()
@common
@seeded
@click.option("--method", "methods", multiple=True, help="Restrict to these run names (repeatable).")
@click.option("--split", default="test", type=click.Choice(["test", "dev"]), show_default=True)
@_guard
def report(config, out, seed, seeds, methods, split):
    """Tabulate finished runs: per-language means and AVG(S)/AVG(Z)/AVG(A) over seeds."""
    cfg, ws = _setup(config, out)
    chosen = H.parse_seeds(seed, seeds, []) or None
    table = H.collect_report(cfg, ws, list(methods) or None, chosen, split)
    if not table.methods:
        raise H.DataError(f"no finished runs under {ws.root / 'runs'}")
    tsv, txt = table.write(ws.reports, f"report_{split}")
    click.echo(table.render())
    click.echo(f"{tsv}\n{txt}")


if __name__ == "__main__":
    main()
