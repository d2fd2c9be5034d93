from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from fdunlearn.fedsim import FLConfig, train_federated  # noqa: E402
from fdunlearn.model import ModelSpec  # noqa: E402
from fdunlearn.tensorio import generate_domains, split_train_test  # noqa: E402

TINY_SHAPE = (3, 16, 16)


@pytest.fixture(scope="session")
def tiny_spec() -> ModelSpec:
    return ModelSpec(
        conv_layers=((4, 3, 1), (6, 3, 1), (8, 3, 2)),
        fc_layers=(16, 8),
        num_classes=4,
        input_shape=TINY_SHAPE,
    )


@pytest.fixture(scope="session")
def tiny_domains():
    doms = generate_domains(5, 3, 4, 80, TINY_SHAPE)
    splits = [split_train_test(d, 0.25, 5) for d in doms]
    return [a for a, _ in splits], [b for _, b in splits]


@pytest.fixture(scope="session")
def tiny_cfg() -> FLConfig:
    return FLConfig(rounds=3, local_epochs=2, lr=0.05, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tiny_domains, tiny_spec, tiny_cfg):
    train, _ = tiny_domains
    return train_federated(train, tiny_cfg, spec=tiny_spec)


@pytest.fixture(scope="session")
def desk():
    from desk import Desk

    return Desk()
