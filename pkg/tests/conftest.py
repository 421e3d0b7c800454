import numpy as np
import pytest

from tppsplit.eventstore import HawkesConfig, simulate_hawkes
from tppsplit.models import Batch, ModelSpec, MTPPModel

HAWKES2 = dict(mu=[0.5, 0.3], alpha=[[0.6, 0.2], [0.3, 0.5]], beta=[[2.0, 1.0], [1.0, 3.0]])


def hawkes2(T=10.0):
    return HawkesConfig(T=T, **HAWKES2)


def tiny_model(family, setting, K=2, seed=0, **kw):
    widths = dict(d_t=2, d_k=2, d_h=3, d_1=3, n_mix=2, n_proj=2)
    widths.update(kw)
    return MTPPModel(ModelSpec(family, setting, K, **widths), seed=seed)


def jitter(model, scale=0.1, seed=0):
    """Move every parameter to a generic point (away from ReLU kinks at zero-initialised biases)."""
    rng = np.random.default_rng(seed)
    for b in model.store:
        model.store.set(b.name, b.values + scale * rng.standard_normal(b.values.shape))
    return model


@pytest.fixture(scope="session")
def small_ds():
    return simulate_hawkes(hawkes2(), 40, seed=11)


@pytest.fixture(scope="session")
def pair_batch():
    ds = simulate_hawkes(hawkes2(T=3.0), 2, seed=5)
    return Batch.from_sequences(ds.sequences)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
