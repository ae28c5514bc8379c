import sys

import numpy as np
import pytest

from relphormer.kgcore import KnowledgeGraph, load_umls


def make_kg(train, valid=(), test=()):
    """KG from labelled triples given as 'h r t' strings."""
    split = lambda rows: [tuple(r.split()) for r in rows]  # noqa: E731
    return KnowledgeGraph.from_labelled(split(train), split(valid), split(test))


@pytest.fixture(scope="session")
def umls():
    return load_umls()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs (deselect with -m 'not slow')")


def pytest_terminal_summary(terminalreporter):
    # one PASS/FAIL line per acceptance criterion that ran
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.summary_lines():
            terminalreporter.write_line(line)
