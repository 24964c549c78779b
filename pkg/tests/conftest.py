import pytest

from tilesim.architecture import HardwareConfig, NodeId, Topology
from tilesim.workload import ComputationGraph, OperatorSpec, OpKind


def tile(x, y):
    return NodeId((x, y))


def linear_chain(n, dims=(8, 256, 256, 256), prefix="l"):
    ops = [OperatorSpec(f"{prefix}{i}", OpKind.LINEAR, dims) for i in range(n)]
    return ComputationGraph(ops, [(f"{prefix}{i}", f"{prefix}{i + 1}") for i in range(n - 1)])


@pytest.fixture
def mesh4():
    return Topology(HardwareConfig(tiles_x=4, tiles_y=4))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[tuple[int, str]] = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
