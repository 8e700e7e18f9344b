import numpy as np
import pytest

from afem_ocp.mesh import create_unit_square_mesh, refine


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def graded_mesh(rng):
    """A locally refined, non-uniform conforming mesh."""
    mesh = create_unit_square_mesh(4)
    for _ in range(4):
        c = mesh.coords.mean(axis=1)
        marked = np.flatnonzero(np.hypot(c[:, 0] - 0.3, c[:, 1] - 0.6) < 0.25)
        mesh, _ = refine(mesh, marked)
    return mesh


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""
    def _report(tag, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
