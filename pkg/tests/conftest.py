import re
import subprocess
import sys

import pytest

from llmimage.mock import MockModel, MockModelSpec

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_spec():
    return MockModelSpec(v=40, d=6, seed=3, k_max=5)


@pytest.fixture
def small_model(small_spec):
    return MockModel(small_spec)


class ServerProcess:
    """``llmimage mock-serve`` running in a child process."""

    def __init__(self, config, *extra):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "llmimage", "mock-serve", "--bind", "127.0.0.1:0",
             "--config", config, *extra],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        self.capabilities = self.proc.stdout.readline().strip()
        match = re.search(r"http://\S+", self.proc.stdout.readline())
        if match is None:
            self.stop()
            raise RuntimeError("mock-serve did not report a URL")
        self.url = match.group(0)

    def stop(self):
        self.proc.terminate()
        self.proc.wait(timeout=10)


@pytest.fixture(scope="module")
def server_process():
    servers = []

    def start(config, *extra):
        servers.append(ServerProcess(config, *extra))
        return servers[-1]

    yield start
    for s in servers:
        s.stop()
