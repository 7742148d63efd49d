import numpy as np
import pytest

from protoalign import tensor as T
from protoalign.config import Config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    with T.precision("double"):
        yield


@pytest.fixture(scope="session")
def tiny_config():
    """A configuration small enough for a full train() call in a few seconds."""
    return Config().with_overrides(
        [
            "data.image_size=16",
            "data.n_source=8",
            "data.n_target=8",
            "data.n_test=4",
            "model.enc_channels=4,8,8",
            "model.head_channels=4",
            "model.embed_depth=4",
            "model.disc_channels=4,4,4",
            "train.epochs=2",
            "train.batch_size=4",
            "dict.dict_size=6",
            "dict.topk=2",
            "eval.feature_points=50",
        ]
    )


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_config):
    from protoalign.data import generate_dataset, write_dataset

    out = tmp_path_factory.mktemp("tiny_data")
    write_dataset(generate_dataset(tiny_config.data), tiny_config.data, out)
    return out


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
