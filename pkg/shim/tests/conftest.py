import pytest
from contract_util import run_app

from modelshim import ShimConfig, app_from_config


@pytest.fixture(scope="session")
def live_server():
    with run_app(app_from_config(ShimConfig())) as url:
        yield url
