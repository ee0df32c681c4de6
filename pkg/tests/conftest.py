import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ckksearch.config_space import FheConfig, GlobalConfig  # noqa: E402
from ckksearch.model_ir import parse_model  # noqa: E402
from ckksearch.replay import DATA_DIR  # noqa: E402


@pytest.fixture(scope="session")
def lenet():
    return parse_model((DATA_DIR / "lenet.json").read_text())


@pytest.fixture(scope="session")
def mlp():
    return parse_model((DATA_DIR / "mlp.json").read_text())


@pytest.fixture(scope="session")
def case_config():
    """The case-study LeNet configuration: 16 usable levels of 22 bits."""
    return FheConfig(GlobalConfig(15, (60,) + (22,) * 16, 22, security_target_bits=256))


def make_config(log_n=15, chain=(60, 40, 40, 40, 40), log_scale=40, **kw) -> FheConfig:
    return FheConfig(GlobalConfig(log_n, tuple(chain), log_scale, **kw))
