import numpy as np
import pytest

from conftest import random_batch, tiny_config
from mblm import tensor as T
from mblm.errors import ConfigError, ContractError, ShapeError
from mblm.gradcheck import check_gradient_vector, check_gradients
from mblm.model import (
    OUTER,
    MblmModel,
    MixerSubmodule,
    ModelConfig,
    StructureVariant,
    analytic_parameter_count,
    ensemble_logits,
    expected_gradient_support,
    gradient_buffers,
    in_support,
    init_from_base,
    mblm_forward,
    mixer_submodule_forward,
)
from mblm.tensor import Tensor

ALL_VARIANTS = list(StructureVariant)


def loop_mixer(v, H, pad):
    """Scalar-loop reference: H [L, n, d], v [n_max], pad [n] bool."""
    L, n, d = H.shape
    out = np.zeros((n, d))
    for j in range(d):
        scores = [sum(v[t] * H[l, t, j] for t in range(n) if not pad[t]) for l in range(L)]
        w = np.exp(np.array(scores) - max(scores))
        w /= w.sum()
        for t in range(n):
            out[t, j] = sum(w[l] * H[l, t, j] for l in range(L))
    return out


def test_mixer_matches_scalar_loop(rng):
    for _ in range(5):
        L, n, d, n_max = 3, 5, 4, 7
        H = rng.normal(size=(L, n, d))
        sub = MixerSubmodule(n_max)
        sub.v.data[:] = rng.normal(size=n_max)
        pad = np.zeros(n, dtype=bool)
        pad[int(rng.integers(2, n)) :] = True
        got = mixer_submodule_forward(sub, [Tensor(h) for h in H], pad).data
        np.testing.assert_allclose(got, loop_mixer(sub.v.data, H, pad), atol=1e-5)


def test_mixer_zero_vector_is_uniform_average(rng):
    H = rng.normal(size=(3, 4, 6))
    out = mixer_submodule_forward(MixerSubmodule(4), [Tensor(h) for h in H]).data
    np.testing.assert_allclose(out, H.mean(0), atol=1e-6)


def test_mixer_contract_errors(rng):
    sub = MixerSubmodule(3)
    with pytest.raises(ShapeError):
        mixer_submodule_forward(sub, [Tensor(rng.normal(size=(5, 2)))] * 2)  # n > n_max
    with pytest.raises(ContractError):
        mixer_submodule_forward(sub, [Tensor(rng.normal(size=(2, 2)))] * 2, n_inputs=3)
    with pytest.raises(ShapeError):
        mixer_submodule_forward(sub, [Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2)))])


def test_mixer_gradients(rng):
    sub = MixerSubmodule(5)
    sub.v.data[:] = rng.normal(size=5)
    xs = [Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True) for _ in range(3)]
    pad = np.array([[False] * 4, [False, False, False, True]])
    errors = check_gradients(lambda: mixer_submodule_forward(sub, xs, pad), [sub.v, *xs], rng=rng)
    assert max(errors) < 1e-3


def test_parameter_names(make_model):
    names = dict(make_model().named_parameters())
    assert "embed.token" in names and "final_norm.gamma" in names and "head.weight" in names
    assert "branch.b.layer.1.wq" in names and "shared.2.w1" in names
    assert f"mixer.0.c.v" in names and f"mixer.1.{OUTER}.v" in names
    assert "mixer.1.a.v" not in names


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_analytic_parameter_count(variant):
    for K in (0, 1, 2, 3):
        if variant.has_branches and K == 0:
            continue
        cfg = tiny_config(variant=variant, branch_depth=K if variant.has_branches else 0, pooler=K == 2)
        assert MblmModel(cfg).num_parameters() == analytic_parameter_count(cfg)


def test_mbert_scale_parameter_ratio():
    cfg = ModelConfig(n_layers=12, branch_depth=4, d_model=768, n_heads=12, d_ff=3072, vocab_size=119547,
                      max_len=512, n_classes=3, languages=("en", "fr", "zh"))
    ratio = analytic_parameter_count(cfg) / analytic_parameter_count(cfg.replace(variant="standard", branch_depth=0))
    assert round(ratio, 2) == 1.32


@pytest.mark.parametrize("variant", [v for v in ALL_VARIANTS if v.has_branches])
def test_init_from_base_reproduces_logits(variant, rng):
    base = MblmModel(tiny_config(variant="standard", branch_depth=0), seed=5)
    model = init_from_base(base, tiny_config(variant=variant))
    for lang in ("a", "c", "zero"):
        batch = random_batch(rng, base.config, lang)
        np.testing.assert_allclose(model(batch).data, base(batch).data, atol=1e-5)


def test_single_branch_init_is_exact(rng):
    base = MblmModel(tiny_config(variant="standard", branch_depth=0, languages=("a",)), seed=2)
    model = init_from_base(base, tiny_config(languages=("a",)))
    batch = random_batch(rng, base.config, "a")
    np.testing.assert_array_equal(model(batch, "train").data, base(batch, "train").data)


def test_init_from_base_rejects_mismatch(make_model):
    base = MblmModel(tiny_config(variant="standard", branch_depth=0))
    with pytest.raises(ConfigError):
        init_from_base(base, tiny_config(d_model=12, n_heads=2))
    with pytest.raises(ConfigError):
        init_from_base(make_model(), tiny_config())


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_gradient_support_matches_structure(variant, rng):
    cfg = tiny_config(variant=variant, branch_depth=0 if variant is StructureVariant.STANDARD else 2)
    model = MblmModel(cfg, seed=1)
    for p in model.parameters():  # non-zero mixers so every path carries signal
        if p.name == "v":
            p.data[:] = rng.normal(size=p.shape)
    for lang in cfg.languages:
        model.zero_grad()
        batch = random_batch(rng, cfg, lang, N=4)
        T.tsum(mblm_forward(model, batch, "train") * Tensor(rng.normal(size=(4, 3)))).backward()
        support = expected_gradient_support(cfg, lang)
        for name, g in gradient_buffers(model).items():
            if in_support(name, support):
                assert np.any(g != 0), (variant, lang, name)
            else:
                assert np.all(g == 0), (variant, lang, name)


def test_mblm_detaches_other_branches(rng):
    cfg = tiny_config()
    model = MblmModel(cfg)
    mblm_forward(model, random_batch(rng, cfg, "b"), "train").sum().backward()
    grads = {n: p.grad for n, p in model.named_parameters()}
    assert all(g is None for n, g in grads.items() if n.startswith(("branch.a.", "branch.c.", "mixer.0.a.")))
    assert all(g is not None for n, g in grads.items() if n.startswith(("branch.b.", "mixer.0.b.", "mixer.1.out")))


def test_inference_never_needs_language(rng):
    cfg = tiny_config()
    model = MblmModel(cfg)
    batch = random_batch(rng, cfg, "unseen")
    assert model(batch).shape == (len(batch), cfg.n_classes)
    with pytest.raises(ContractError):
        mblm_forward(model, batch, "train")
    with pytest.raises(ContractError):
        mblm_forward(model, batch, "eval")


def test_standard_model_trains_on_any_language(rng):
    cfg = tiny_config(variant="standard", branch_depth=0)
    assert mblm_forward(MblmModel(cfg), random_batch(rng, cfg, "unseen"), "train").shape == (3, 3)


def test_no_mixers_single_uses_own_branch_at_inference(rng):
    cfg = tiny_config(variant="no-mixers-single")
    model = MblmModel(cfg, seed=3)
    batch = random_batch(rng, cfg, "a")
    np.testing.assert_allclose(model(batch, "infer").data, model(batch, "train").data, atol=1e-6)


# unit-scale embeddings keep LayerNorm curvature small enough for fp32 central differences
GRAD_CFG = dict(n_layers=2, branch_depth=1, d_model=8, d_ff=8, vocab_size=9, max_len=4, embed_std=1.0)


@pytest.mark.parametrize("variant", ["standard", "mblm", "no-mixers-all", "branches-at-top"])
def test_end_to_end_gradients(variant, rng):
    # inference mode detaches nothing, so backprop must equal the total derivative
    cfg = tiny_config(**{**GRAD_CFG, "variant": variant, "branch_depth": 0 if variant == "standard" else 1})
    model = MblmModel(cfg, seed=4)
    for p in model.parameters():
        if p.name == "v":
            p.data[:] = rng.normal(size=p.shape)
    batch = random_batch(rng, cfg, "a", N=2)
    whole, per_tensor = check_gradient_vector(lambda: mblm_forward(model, batch, "infer"), model.parameters(),
                                              step=3e-3, rng=rng)
    assert whole < 1e-3
    assert np.median(per_tensor) < 1e-2


def test_train_mode_gradient_is_the_detached_derivative(rng):
    """In train mode, backprop equals finite differences of a copy where only branch k moves."""
    cfg = tiny_config(**GRAD_CFG)
    model = MblmModel(cfg, seed=4)
    batch = random_batch(rng, cfg, "b", N=2)
    own = [p for n, p in model.named_parameters() if n.startswith(("branch.b.", "mixer.0.out", "shared.", "head."))]
    whole, _ = check_gradient_vector(lambda: mblm_forward(model, batch, "train"), own, step=3e-3, rng=rng)
    assert whole < 1e-3
    # the embedding also feeds the detached branches, so its backprop gradient differs
    emb = [model.embed.token]
    assert check_gradients(lambda: mblm_forward(model, batch, "train"), emb, step=3e-3, rng=rng)[0] > 1e-2


def test_ensemble_averages_logits(rng):
    cfg = tiny_config(variant="standard", branch_depth=0)
    m1, m2 = MblmModel(cfg, seed=1), MblmModel(cfg, seed=2)
    batch = random_batch(rng, cfg, "a")
    np.testing.assert_allclose(ensemble_logits([m1, m2], batch).data, (m1(batch).data + m2(batch).data) / 2,
                               atol=1e-6)
    assert m1.num_parameters() + m2.num_parameters() == 2 * m1.num_parameters()
    with pytest.raises(ConfigError):
        ensemble_logits([m1], batch)
    with pytest.raises(ConfigError):
        ensemble_logits([m1, MblmModel(cfg.replace(n_classes=5))], batch)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(branch_depth=4)
    with pytest.raises(ConfigError):
        tiny_config(variant="sideways")
    with pytest.raises(ConfigError):
        tiny_config(languages=("a", OUTER))
    assert StructureVariant.parse("NO_DETACH") is StructureVariant.NO_DETACH


def test_config_dict_roundtrip():
    cfg = tiny_config(variant="branches-at-top")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "extra": 1})
