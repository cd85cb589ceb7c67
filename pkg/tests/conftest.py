import pytest

from dwsteal.bench.cholesky import CholeskyConfig, build_cholesky
from dwsteal.config import RunConfig
from dwsteal.runtime import NodeRuntime
from dwsteal.transport import InProcNetwork


@pytest.fixture
def chol8():
    return build_cholesky(CholeskyConfig(T=8, tile=16, seed=1))


@pytest.fixture
def make_nodes():
    """Build (but do not start) one runtime per node on one in-process network."""

    def _make(program, **cfg):
        config = RunConfig(**cfg)
        net = InProcNetwork(config.nodes)
        return [NodeRuntime(r, program, net.endpoint(r), config) for r in range(config.nodes)]

    return _make
