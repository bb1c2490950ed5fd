import sys

import pytest

from lptrack.client import NO_RETRY, EndpointConfig
from lptrack.server import SimEndpoint, SimulatorServer
from lptrack.simulator import SyntheticModel


@pytest.fixture
def serve():
    """Start a simulator server for a dict of endpoints; stopped at teardown."""
    servers = []

    def start(endpoints: dict[str, SimEndpoint]) -> SimulatorServer:
        server = SimulatorServer(endpoints).start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()


@pytest.fixture
def quiet_model():
    return SyntheticModel.random(vocab_size=32, noise_sigma=0.0, top_k=5, seed=7)


def endpoint(server: SimulatorServer, model_id: str, **kw) -> EndpointConfig:
    kw.setdefault("retry", NO_RETRY)
    kw.setdefault("timeout", 5.0)
    return EndpointConfig(server.url, model_id, **kw)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
