from __future__ import annotations

import pytest

from coeflow.arch import builtin_platform
from coeflow.fixtures import decoder, monarch


@pytest.fixture(scope="session")
def sn40l():
    return builtin_platform("sn40l_node")


@pytest.fixture(scope="session")
def a100():
    return builtin_platform("dgx_a100")


@pytest.fixture(scope="session")
def h100():
    return builtin_platform("dgx_h100")


@pytest.fixture(scope="session")
def monarch_graph():
    return monarch()


@pytest.fixture(scope="session")
def prefill_graph():
    return decoder()


@pytest.fixture(scope="session")
def decode_graph():
    return decoder(decode=True)
