import numpy as np
import pytest

from sparse_pathways import datagen
from sparse_pathways.model import Model, ModelConfig


def central_diff(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Finite-difference gradient of scalar f at x (float64, perturbs a copy)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def suite():
    return datagen.make_default_suite(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=12, context_window=3, embed_dim=4, hidden_dim=16, num_hidden_layers=2)


@pytest.fixture
def tiny_model(tiny_config):
    return Model.init(tiny_config, np.random.default_rng(0))


def random_batch(rng, config, n=32):
    x = rng.integers(0, config.vocab_size, size=(n, config.context_window))
    y = rng.integers(0, config.vocab_size, size=n)
    return x, y


def batch_stream(config, seed=0, n=32, distinct=4):
    """Endless cycle over a few fixed random batches (a tiny learnable corpus)."""
    rng = np.random.default_rng(seed)
    fixed = [random_batch(rng, config, n) for _ in range(distinct)]
    i = 0
    while True:
        yield fixed[i % distinct]
        i += 1


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
