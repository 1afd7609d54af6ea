import sys

import pytest

from slicealign.config import load_config
from slicealign.volume_data import make_phantom_dataset

TINY = [
    "model.base_width=4",
    "model.proj_dim=16",
    "augment.output_size=[32, 32]",
    "pairing.n=4",
    "loss.omega=2",
    "pretrain.epochs=1",
    "finetune.steps=5",
    "finetune.batch_size=4",
]


@pytest.fixture
def tiny_cfg():
    return load_config(overrides=TINY)


@pytest.fixture(scope="session")
def tiny_data():
    return make_phantom_dataset(4, 8, 32, 32, seed=0)


def pytest_terminal_summary(terminalreporter):

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
