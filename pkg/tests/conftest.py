import time

import numpy as np
import pytest

from decu.dataset import DatasetConfig, make_binned_dataset
from decu.diffusion import ClassEmbeddingTable
from decu.ensemble import EnsembleModel, ModelConfig, build_ensemble

SMALL_DATA = DatasetConfig(class_counts=(2, 2, 2, 2), bin_counts=(1, 2, 4, 8))
SMALL_MODEL = ModelConfig(hidden=32, embed_dim=8, pretrain_steps=150, component_steps=60,
                          batch_size=32, n_components=3)


@pytest.fixture(scope="session")
def small_dataset():
    return make_binned_dataset(SMALL_DATA, seed=3)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    return build_ensemble(small_dataset, SMALL_MODEL, master_seed=11)


def with_tables(model, tables):
    return EnsembleModel(model.backbone, tables, model.config, tuple(range(len(tables))),
                         model.image_shape)


@pytest.fixture(scope="session")
def degenerate_model(small_model):
    """Every component shares component 0's table."""
    t = small_model.tables[0]
    return with_tables(small_model, [ClassEmbeddingTable(t.weights.copy()) for _ in range(4)])


@pytest.fixture(scope="session")
def separated_model(small_model):
    """Embeddings pushed far apart in random directions per component."""
    rng = np.random.default_rng(5)
    base = small_model.tables[0].weights
    tables = [ClassEmbeddingTable(base + 1e5 * rng.normal(size=base.shape)) for _ in range(5)]
    return with_tables(small_model, tables)


SHIPPED_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def shipped_runs():
    """Default-config ensembles for every shipped master seed, trained once.

    Returns {seed: (RunConfig, dataset, model)}.
    """
    from decu.config import RunConfig

    out = {}
    for seed in SHIPPED_SEEDS:
        start = time.perf_counter()
        run = RunConfig(master_seed=seed).validate()
        ds = make_binned_dataset(run.dataset, run.resolved_dataset_seed())
        out[seed] = (run, ds, build_ensemble(ds, run.model, seed, run.resolved_component_seeds()))
        TRAIN_SECONDS[seed] = time.perf_counter() - start
    return out


TRAIN_SECONDS = {}
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
