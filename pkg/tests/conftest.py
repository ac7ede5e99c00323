import numpy as np
import pytest

from pfode.distill import GuidedTeacher, train_teacher
from pfode.mixture import ring_mixture
from pfode.schedule import NoiseSchedule


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def ring():
    return ring_mixture()


@pytest.fixture(scope="session")
def teacher(ring, schedule):
    """Full-budget conditional teacher shared by the slower tests."""
    net, _ = train_teacher(ring, schedule, np.random.default_rng(0), steps=5000)
    return net


@pytest.fixture(scope="session")
def guided(teacher):
    return GuidedTeacher(teacher, 8.0)


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        log.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
