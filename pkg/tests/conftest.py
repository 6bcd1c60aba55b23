import pytest
from stub_http import stub_server


@pytest.fixture
def http_stub():
    with stub_server() as (state, url):
        yield state, url
