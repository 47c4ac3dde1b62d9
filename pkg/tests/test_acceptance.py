"""One line per acceptance criterion, printed to stdout and in the summary."""
import pytest

from teeagg import acceptance
from teeagg.acceptance import CRITERIA, run_suite

# pinned tolerances; changing any of these requires changing this file too
PINNED = {
    "FLOAT_ZERO_SUM_PER_N": 2.0**-20,
    "FLOAT_BARRIER_REL": 1e-4,
    "MIN_ACCURACY": 0.95,
    "ZERO_SUM_NS": (1, 2, 3, 4, 8, 16, 32, 64),
    "TREE_CS": (2, 3, 4, 8),
    "TREE_NMAX": 64,
    "BARRIER_SEEDS": 50,
    "BARRIER_N": 8,
}
TIME_LIMITS = {1: 10.0, 2: 30.0, 3: 60.0, 4: 120.0, 5: 60.0}


@pytest.mark.parametrize("name", sorted(PINNED))
def test_tolerance_is_pinned(name):
    assert getattr(acceptance, name) == PINNED[name]


@pytest.mark.parametrize("check", CRITERIA, ids=lambda f: f.__name__)
def test_criterion(check, acceptance_lines):
    result = check()
    line = result.line()
    acceptance_lines.append(line)
    print(line)
    assert result.limit == TIME_LIMITS.get(result.number)
    assert result.passed, "\n".join(result.failures)
    assert result.within_limit, f"took {result.seconds:.2f}s"


def test_planted_violation_is_caught():
    (result,) = run_suite("planted-violation")
    assert not result.passed and result.failures
