import pytest

from modno.bench import experiment_config
from modno.trainer import TrainConfig


def tiny_config(name="exp1", **overrides):
    """A named experiment shrunk to a few seconds of work."""
    small = dict(n_train=6, n_test=4, n_sensors=16, n_query=16, n_grid=128, basis_count=4,
                 branch_hidden=(8,), trunk_hidden=(8,), q_values=(1.0, 0.7),
                 train=TrainConfig(epochs=2, minibatch_size=3, seed=0))
    small.update(overrides)
    return experiment_config(name, **small)


@pytest.fixture
def tiny():
    return tiny_config()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
