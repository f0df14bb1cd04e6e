"""Shared desk-scale fixtures. Training is the slow part, so the dataset and
the baseline MLP are built once per session and reused read-only."""

import numpy as np
import pytest

from fddbench import data as dt
from fddbench import models as md

DESK_DATA_SEED = 2024
DESK_MODEL_SEED = 1
DESK_SYNTH = dict(seed=DESK_DATA_SEED, classes=5, sensors=8, run_length=115,
                  runs_per_class=10, separation=2.5, near_pair_gap=1.05)


@pytest.fixture(scope="session")
def desk_runs():
    return dt.synth_generate(**DESK_SYNTH)


@pytest.fixture(scope="session")
def desk_data(desk_runs):
    train, test = dt.prepare_datasets(desk_runs, k=16, train_fraction=0.8, seed=DESK_DATA_SEED)
    assert len(train) == 4000 and len(test) == 1000
    return train, test


@pytest.fixture(scope="session")
def desk_mlp(desk_data):
    train, _ = desk_data
    model = md.build_model(md.desk_config("MLP", seed=DESK_MODEL_SEED))
    md.train(model, train)
    return model


@pytest.fixture(scope="session")
def small_data():
    """Tiny 3-class set for quick training smoke tests."""
    runs = dt.synth_generate(seed=7, classes=3, sensors=4, run_length=47,
                             runs_per_class=6, separation=3.0)
    return dt.prepare_datasets(runs, k=8, train_fraction=0.8, seed=7)
