import numpy as np
import pytest

from lcgode.graph import ArchitectureGraph


def random_dag(rng, num_nodes=None, kind=None, density=0.4):
    """Random DAG over a shuffled topological order."""
    n = int(num_nodes or rng.integers(1, 12))
    kind = kind or ("mlp" if rng.random() < 0.5 else "cnn_cell")
    order = rng.permutation(n)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < density:
                label = 1 if kind == "mlp" else int(rng.integers(0, 4))
                edges.append((int(order[i]), int(order[j]), label))
    if not edges:
        return ArchitectureGraph(n, [], [], [], kind)
    return ArchitectureGraph.from_edges(n, edges, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion, shown in the summary."""

    def record(number, title, ok, detail):
        line = f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
