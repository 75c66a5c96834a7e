import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from taskmoe.corpus import Vocab, few_shot_subsample, generate_suite
from taskmoe.transformer import ExpertGrid, ModelConfig

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def tiny_config(**kw):
    base = dict(n_layers=2, n_experts=2, d_model=8, n_heads=2, d_ff=16, vocab_size=12,
                max_seq_len=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_grid(seed=0, **kw):
    return ExpertGrid.random(tiny_config(**kw), np.random.default_rng(seed))


def toy_batch(rng, B=3, S=5, T=4, V=12):
    x = rng.integers(3, V, (B, S))
    y = rng.integers(3, V, (B, T))
    y[:, -1] = 2
    return x, y


@pytest.fixture(scope="session")
def suite():
    return generate_suite(rng_seed=0)


@pytest.fixture(scope="session")
def vocab(suite):
    return Vocab.from_tasks(suite)


@pytest.fixture(scope="session")
def small_tasks(suite):
    """Three few-shot tasks from different categories."""
    picks = {}
    for t in suite:
        picks.setdefault(t.category, t)
    return [few_shot_subsample(t, i) for i, t in enumerate(list(picks.values())[:3])]


@pytest.fixture(scope="session")
def small_model_config(vocab):
    return ModelConfig(n_layers=2, n_experts=2, d_model=16, n_heads=2, d_ff=32,
                       vocab_size=len(vocab), max_seq_len=32)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE = {}


def record(key, ok, detail=""):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"criterion {key:<8} {'PASS' if ok else 'FAIL'}  {detail}")
