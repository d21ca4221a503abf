import numpy as np
import pytest

from mblm.model import MblmModel, ModelConfig
from mblm.nn import Batch
from mblm.synth import TaskConfig, build_splits


def random_batch(rng, config: ModelConfig, language: str, N: int = 3, n: int | None = None,
                 pad: bool = True) -> Batch:
    """Token ids avoiding PAD, with a random amount of right padding per row."""
    n = n or config.max_len
    tokens = rng.integers(1, config.vocab_size, size=(N, n))
    if pad:
        for i in range(N):
            keep = int(rng.integers(2, n + 1))
            tokens[i, keep:] = 0
    labels = rng.integers(0, config.n_classes, size=N)
    return Batch(tokens, language, labels)


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=3, branch_depth=2, d_model=8, n_heads=2, d_ff=12, languages=("a", "b", "c"),
                n_classes=3, vocab_size=20, max_len=7)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bundle():
    cfg = TaskConfig(segment_len=3, base_vocab=12, n_zero_shot=2, train_size=90, dev_size=30, test_size=30, seed=3)
    return build_splits(cfg)


@pytest.fixture
def make_model():
    def make(seed=0, **kw):
        return MblmModel(tiny_config(**kw), seed=seed)

    return make


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
