"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal summary.  The
desk-scale runs (criteria 6-9) train from scratch into a temporary directory; set
MBLM_ACCEPTANCE_DIR to keep and reuse that workspace between invocations.
"""

import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import ACCEPTANCE, random_batch, tiny_config
from mblm import harness as H
from mblm import tensor as T
from mblm.cli import main
from mblm.distill import TrainPlan, Trainer, entropy, kd_loss, soften
from mblm.gradcheck import check_gradient_vector, check_gradients, numeric_grad, relative_error
from mblm.model import (
    MblmModel,
    MixerSubmodule,
    _stack_inputs,
    analytic_parameter_count,
    gradient_buffers,
    init_from_base,
    mblm_forward,
    mixer_submodule_forward,
    mixing_weights,
)
from mblm.tensor import Tensor
from test_tensor import PRIMITIVES, leaf

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
INSTANCES = 20


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1 -----------------------------------------------------------------------------------
ACCEPT_PRIMITIVES = {
    **PRIMITIVES,
    "swapaxes": (lambda a: T.swapaxes(a, 0, 2), [(2, 3, 4)]),
    "gather": None,
    "dropout": None,
}


def primitive_instance(name, rng):
    if name == "gather":
        table = leaf(rng, 6, 3)
        ids = rng.integers(0, 6, size=(2, 4))
        return (lambda: T.gather(table, ids)), [table]
    if name == "dropout":
        x = leaf(rng, 3, 5)
        seed = int(rng.integers(1 << 30))
        return (lambda: T.dropout(x, 0.3, np.random.default_rng(seed))), [x]
    fn, shapes = ACCEPT_PRIMITIVES[name]
    args = [leaf(rng, *s[1:], positive=True) if s[0] == "+" else leaf(rng, *s) for s in shapes]
    return (lambda: fn(*args)), args


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name in sorted(ACCEPT_PRIMITIVES):
        errs = []
        for _ in range(INSTANCES):
            fn, params = primitive_instance(name, rng)
            errs.extend(check_gradients(fn, params, step=1e-3, rng=rng))
        worst[name] = max(errs)
    prim_ok = max(worst.values()) < 1e-3

    # 2-block end-to-end model; the full concatenated gradient vector is compared
    whole, per_tensor = [], []
    for i in range(INSTANCES):
        cfg = tiny_config(n_layers=2, branch_depth=0, variant="standard", d_model=8, d_ff=8,
                          vocab_size=9, max_len=4, embed_std=1.0)
        model = MblmModel(cfg, seed=100 + i)
        batch = random_batch(rng, cfg, "a", N=2)
        w, pt = check_gradient_vector(lambda: mblm_forward(model, batch, "infer"), model.parameters(),
                                      step=1e-3, rng=rng)
        whole.append(w)
        per_tensor.append(max(pt))
    elapsed = time.perf_counter() - t0
    model_ok = max(whole) < 1e-3
    worst_prim = max(worst, key=worst.get)
    detail = (f"{len(worst)} primitives x {INSTANCES}: max rel err {worst[worst_prim]:.2e} ({worst_prim}); "
              f"2-block model x {INSTANCES}: max whole-vector rel err {max(whole):.2e} "
              f"(worst single tensor {max(per_tensor):.2e}, median of per-instance worst "
              f"{np.median(per_tensor):.2e}); {elapsed:.1f}s")
    record(1, prim_ok and model_ok and elapsed < 60, detail)


# -- 2 -----------------------------------------------------------------------------------
def test_criterion_2_detach_invariant(small_bundle):
    bundle = small_bundle
    langs = tuple(bundle.supervised)
    cfg = tiny_config(n_layers=3, branch_depth=2, languages=langs, vocab_size=bundle.config.vocab_size,
                      max_len=bundle.config.seq_len, n_classes=bundle.config.n_classes)
    teachers = {l: MblmModel(cfg.replace(variant="standard", branch_depth=0), seed=50 + i)
                for i, l in enumerate(langs)}
    leaks, complete = 0, 0
    for trial in range(100):
        student = MblmModel(cfg, seed=trial)
        tr = Trainer(student, bundle, TrainPlan(mode="multikd", batch_size=8, seed=trial), teachers)
        k = tr.train_step()["language"]
        grads = gradient_buffers(student)
        others = [n for n in grads if any(n.startswith(f"branch.{l}.") or (n.startswith("mixer.") and f".{l}." in n)
                                          for l in langs if l != k)]
        leaks += any(np.any(grads[n] != 0) for n in others)
        groups = {
            "branch-k": [n for n in grads if n.startswith(f"branch.{k}.")],
            "inner-mixer-k": [n for n in grads if n.startswith("mixer.") and f".{k}." in n],
            "outer-mixer": [n for n in grads if n.startswith("mixer.") and ".out." in n],
            "shared": [n for n in grads if n.startswith("shared.")],
            "embedding": [n for n in grads if n.startswith("embed.")],
            "head": [n for n in grads if n.startswith("head.")],
        }
        assert all(groups.values()), groups
        complete += all(any(np.any(grads[n] != 0) for n in names) for names in groups.values())
    record(2, leaks == 0 and complete >= 95,
           f"100 MultiKD steps: {leaks} trials with nonzero off-branch gradients; "
           f"{complete}/100 trials with nonzero gradients in every on-path group")


# -- 3 -----------------------------------------------------------------------------------
def test_criterion_3_mixer_normalization():
    rng = np.random.default_rng(3)
    worst_sum, worst_id = 0.0, 0.0
    for _ in range(1000):
        N, L, n, d = (int(x) for x in rng.integers(1, 5, size=4))
        L += 1
        sub = MixerSubmodule(n + int(rng.integers(0, 3)))
        sub.v.data[:] = rng.normal(size=sub.v.shape) * rng.uniform(0.1, 5)
        H = rng.normal(size=(L, N, n, d)) * rng.uniform(0.1, 5)
        pad = rng.random((N, n)) < 0.3
        pad[:, 0] = False
        _, masked = _stack_inputs([Tensor(h) for h in H], pad)
        w = mixing_weights(sub.v, masked).data
        worst_sum = max(worst_sum, float(np.abs(w.astype(np.float64).sum(axis=1) - 1).max()))
        same = mixer_submodule_forward(sub, [Tensor(H[0])] * L, pad).data
        worst_id = max(worst_id, float(np.abs(same - H[0].astype(np.float32)).max()))
    record(3, worst_sum <= 1e-6 and worst_id <= 1e-6,
           f"1000 evaluations: max |sum w - 1| {worst_sum:.2e}; all-equal inputs max deviation {worst_id:.2e}")


# -- 4 -----------------------------------------------------------------------------------
def test_criterion_4_init_equivalence():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        base = MblmModel(tiny_config(variant="standard", branch_depth=0), seed=i)
        student = init_from_base(base, tiny_config(variant="mblm", branch_depth=2))
        batch = random_batch(rng, base.config, str(rng.choice(["a", "b", "c"])), N=4)
        worst = max(worst, float(np.abs(student(batch).data - base(batch).data).max()))
    exact = True
    for i in range(20):
        base = MblmModel(tiny_config(variant="standard", branch_depth=0, languages=("a",)), seed=i)
        student = init_from_base(base, tiny_config(variant="mblm", branch_depth=2, languages=("a",)))
        batch = random_batch(rng, base.config, "a", N=4)
        exact &= np.array_equal(student(batch).data, base(batch).data)
    record(4, worst <= 1e-5 and exact,
           f"100 batches, 3 branches: max-abs logit diff {worst:.2e}; one branch bit-exact: {exact}")


# -- 5 -----------------------------------------------------------------------------------
def test_criterion_5_kd_contracts():
    rng = np.random.default_rng(5)
    self_gap, below, grad_err, oracle_err = 0.0, 0, 0.0, 0.0
    for _ in range(1000):
        N, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        tau = float(rng.choice([1.0, 2.0, 8.0]))
        t, s = rng.normal(size=(N, C)) * 4, rng.normal(size=(N, C)) * 4
        self_gap = max(self_gap, abs(kd_loss(t, Tensor(t), tau).item() - entropy(soften(t, tau))))
        below += kd_loss(t, Tensor(s), tau).item() < entropy(soften(t, tau)) - 1e-6
    for _ in range(INSTANCES):
        N, C, tau = 4, 3, float(rng.choice([1.0, 2.0, 8.0]))
        t = rng.normal(size=(N, C)) * 5
        s = Tensor(rng.normal(size=(N, C)) * 5, requires_grad=True)
        kd_loss(t, s, tau).backward()
        closed = (soften(s.data, tau).astype(np.float64) - soften(t, tau)) / (N * tau)
        oracle_err = max(oracle_err, relative_error(s.grad, closed))
        fd = numeric_grad(lambda: kd_loss(t, s, tau), s, np.ones(()), step=1e-2)
        grad_err = max(grad_err, relative_error(s.grad, fd))
    ok = self_gap <= 1e-6 and below == 0 and oracle_err < 1e-3 and grad_err < 1e-3
    record(5, ok, f"kd(p,p)-H(p) max {self_gap:.1e}; {below}/1000 pairs below teacher entropy; "
                  f"logit gradient vs closed form {oracle_err:.1e}, vs finite differences {grad_err:.1e}")


# -- 6-9: desk-scale runs ------------------------------------------------------------------
METHODS = {
    "MultiTrain": ("multitrain", "standard"),
    "MultiKD": ("multikd", "standard"),
    "MultiKD+MBLM": ("multikd", "mblm"),
    "NoDetach": ("multikd", "no-detach"),
}


def cli(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    keep = os.environ.get("MBLM_ACCEPTANCE_DIR")
    out = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    if not (out / "data" / "bundle.jsonl").exists():
        cli("generate", "--config", DESK, "--out", out)
    cli("train-teacher", "--config", DESK, "--out", out)
    for mode, variant in METHODS.values():
        cli("run", "--config", DESK, "--out", out, "--mode", mode, "--variant", variant, "--resume")
    elapsed = time.perf_counter() - t0
    cfg = H.load_config(DESK)
    names = {label: H.method_name(mode, variant, cfg.model.branch_depth) for label, (mode, variant) in METHODS.items()}
    report = H.collect_report(cfg, H.Workspace(out), list(names.values()), list(cfg.run.seeds))
    print(report.render())
    return cfg, out, names, report, elapsed


def per_seed(report, name, which):
    return np.array([report.seed_aggregate(name, s, which) for s in sorted(report.cells[name])])


@pytest.mark.slow
def test_criterion_6_trend_reproduction(desk):
    cfg, _, names, report, elapsed = desk
    n = len(cfg.run.seeds)
    s_train, s_kd = per_seed(report, names["MultiTrain"], "AVG(S)"), per_seed(report, names["MultiKD"], "AVG(S)")
    z_kd, z_mblm = per_seed(report, names["MultiKD"], "AVG(Z)"), per_seed(report, names["MultiKD+MBLM"], "AVG(Z)")
    a_train, a_mblm = per_seed(report, names["MultiTrain"], "AVG(A)"), per_seed(report, names["MultiKD+MBLM"], "AVG(A)")
    assert len(s_train) == len(s_kd) == len(z_mblm) == n
    margin_a = s_kd.mean() - s_train.mean()
    margin_b = z_mblm.mean() - z_kd.mean()
    # noise: one standard error of the paired per-seed difference
    noise_b = np.std(z_mblm - z_kd, ddof=1) / np.sqrt(n)
    fallback = a_mblm.mean() - a_train.mean()
    ok_a, ok_b = margin_a > 0, margin_b > 0
    within_noise = margin_b <= noise_b
    ok = ok_a and ok_b and (not within_noise or fallback >= 0)
    fmt = lambda x: f"{100 * x.mean():.2f}±{100 * np.std(x, ddof=1):.2f}"  # noqa: E731
    detail = (f"{n} seeds. (a) AVG(S) MultiKD {fmt(s_kd)} vs MultiTrain {fmt(s_train)}: margin {100 * margin_a:+.2f}. "
              f"(b) AVG(Z) MultiKD+MBLM {fmt(z_mblm)} vs MultiKD {fmt(z_kd)}: margin {100 * margin_b:+.2f} "
              f"(paired s.e. {100 * noise_b:.2f}{', within noise' if within_noise else ''}). "
              f"AVG(A) MultiKD+MBLM {fmt(a_mblm)} vs MultiTrain {fmt(a_train)}: {100 * fallback:+.2f}. "
              f"pipeline {elapsed / 60:.1f} min")
    record(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_ablation_ordering(desk):
    _, _, names, report, _ = desk
    z_mblm, z_nd = per_seed(report, names["MultiKD+MBLM"], "AVG(Z)"), per_seed(report, names["NoDetach"], "AVG(Z)")
    record(7, z_nd.mean() <= z_mblm.mean(),
           f"AVG(Z) NoDetach {100 * z_nd.mean():.2f}±{100 * np.std(z_nd, ddof=1):.2f} vs "
           f"Mblm {100 * z_mblm.mean():.2f}±{100 * np.std(z_mblm, ddof=1):.2f} over {len(z_mblm)} seeds")


@pytest.mark.slow
def test_criterion_8_efficiency(desk):
    cfg, out, _, _, _ = desk
    ws = H.Workspace(out)
    counts, analytic = H.parameter_counts(cfg)
    mc = cfg.student_config("mblm")
    exact = counts["Mblm"] == analytic == analytic_parameter_count(mc)
    ens = counts["Ens_2"] == 2 * counts["Standard"]
    bundle = H.load_dataset(cfg, ws)
    per_step, ratios = H.time_training_steps(cfg, ws, bundle, cfg.run.seeds[0], cfg.run.timing_steps,
                                             cfg.run.timing_repeats)
    ratio = float(np.mean(ratios))
    record(8, exact and ens and ratio <= 1.3,
           f"Mblm params {counts['Mblm']} (analytic {analytic}); Ens_2 {counts['Ens_2']} = "
           f"{counts['Ens_2'] / counts['Standard']:.0f}x Standard {counts['Standard']}; step time "
           f"{1e3 * np.mean(per_step['Mblm']):.1f} ms vs {1e3 * np.mean(per_step['Standard']):.1f} ms, "
           f"ratio {ratio:.3f}±{np.std(ratios):.3f} (MultiKD step, teacher forward included)")


@pytest.mark.slow
def test_criterion_9_determinism(desk, tmp_path):
    cfg, out, names, _, _ = desk
    seed = cfg.run.seeds[0]
    fresh = tmp_path / "rerun"
    cli("generate", "--config", DESK, "--out", fresh)
    same_data = H.file_sha256(fresh / "data/bundle.jsonl") == H.file_sha256(out / "data/bundle.jsonl")
    shutil.copytree(out / "teachers", fresh / "teachers")
    cli("pretrain", "--config", DESK, "--out", fresh, "--seed", seed)
    same_substrate = (H.file_sha256(H.Workspace(fresh).substrate(seed))
                      == H.file_sha256(H.Workspace(out).substrate(seed)))
    cli("run", "--config", DESK, "--out", fresh, "--seed", seed)
    mismatched = [f for f in ("metrics.tsv", "history.jsonl", "epochs.jsonl")
                  if H.file_sha256(H.Workspace(fresh).run_dir(names["MultiKD+MBLM"], seed) / f)
                  != H.file_sha256(H.Workspace(out).run_dir(names["MultiKD+MBLM"], seed) / f)]
    record(9, same_data and same_substrate and not mismatched,
           f"re-run in a fresh directory: dataset identical {same_data}; substrate identical {same_substrate}; "
           f"run files differing {mismatched or 'none'}")
