import pytest

from fedinject.config import ExperimentConfig
from fedinject.datagen import build_dataset
from fedinject.tasks import RAW_SHAPES


def random_sample(task, batch, rng):
    return {m: rng.normal(size=(batch,) + RAW_SHAPES[m]) for m in task.modalities}


def fast_config(**fed) -> ExperimentConfig:
    """Desk learning rates and a short schedule; small enough for unit tests."""
    cfg = ExperimentConfig()
    cfg.data.n_per_task = 200
    cfg.data.n_validation = 100
    base = dict(local_lr=1e-2, foundation_lr=1e-2, finetune_lr=1e-2, num_rounds=2)
    base.update(fed)
    return cfg.replace(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(0, n_per_task=200, n_clients=5, margin=1.0, n_validation=100)


# acceptance summary lines, repeated at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
