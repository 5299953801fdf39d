import random

import pytest

from alchemist import server
from alchemist.errors import GatewayStartupError


def start_gateway(num_workers: int, **kwargs) -> server.Gateway:
    """Start a gateway on a free port range, retrying on collisions."""
    kwargs.setdefault("log_path", "/dev/null")
    rng = random.Random()
    last = None
    for _ in range(32):
        base = rng.randrange(20000, 55000)
        try:
            return server.start(num_workers, base, **kwargs)
        except GatewayStartupError as exc:
            last = exc
    raise RuntimeError(f"no free port range found: {last}")


@pytest.fixture
def gateway():
    gw = start_gateway(6)
    yield gw
    gw.stop()


@pytest.fixture
def gateway9():
    gw = start_gateway(9)
    yield gw
    gw.stop()
