import numpy as np
import pytest

from pairseq.dataset import extract_5seqs
from pairseq.synthgen import SynthSpec, generate, generate_runs


@pytest.fixture(scope="session")
def synth_one():
    """One subject, full run structure, default signal."""
    return generate(SynthSpec(n_subjects=1, seed=3))


@pytest.fixture(scope="session")
def runs_one(synth_one):
    return synth_one.preprocessed()


@pytest.fixture(scope="session")
def seqs_one(runs_one):
    return extract_5seqs(runs_one)


@pytest.fixture(scope="session")
def seqs_two():
    return extract_5seqs(generate_runs(SynthSpec(n_subjects=2, seed=5)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
