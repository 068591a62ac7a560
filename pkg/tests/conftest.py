import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hiercon.data import SyntheticSpec, synthetic_stacks  # noqa: E402
from hiercon.losses import LossConfig  # noqa: E402
from hiercon.model import fixture_config  # noqa: E402
from hiercon.training import TrainConfig, train  # noqa: E402

FIXTURE_SEED = 7


def fixture_spec(**overrides) -> SyntheticSpec:
    base = dict(n_real=64, n_fake=64, n_val_real=32, n_val_fake=32, seed=FIXTURE_SEED)
    base.update(overrides)
    return SyntheticSpec(**base)


def fixture_train_config(**overrides) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=16, max_epochs=50, patience=10, seed=FIXTURE_SEED,
                loss=LossConfig(margin=0.5, lambda_con=0.1))
    base.update(overrides)
    return TrainConfig(**base)


def as_arrays(spec: SyntheticSpec, split: str):
    stacks = synthetic_stacks(spec, split)
    return np.stack([v for _, _, v in stacks]), np.array([y for _, y, _ in stacks])


@dataclass
class Corpus:
    spec: SyntheticSpec
    train: tuple
    val: tuple


@pytest.fixture(scope="session")
def corpus():
    spec = fixture_spec()
    return Corpus(spec, as_arrays(spec, "train"), as_arrays(spec, "val"))


@dataclass
class TrainedFixture:
    cfg: object
    result: object
    seconds: float

    def __iter__(self):
        return iter((self.cfg, self.result))


@pytest.fixture(scope="session")
def trained(corpus):
    cfg = fixture_config()
    start = time.perf_counter()
    result = train(cfg, corpus.train, corpus.val, fixture_train_config())
    return TrainedFixture(cfg, result, time.perf_counter() - start)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
