import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from match_adaptive.core import Sample, Unit  # noqa: E402
from match_adaptive.matcher import optimal_pair_match  # noqa: E402
from oracle_values import NAMES, SCORES, Y0, Z  # noqa: E402

DATA = os.path.join(os.path.dirname(__file__), "data")
ACCEPTANCE_LINES: list[str] = []


def figure1_sample() -> Sample:
    return Sample(tuple(Unit(n, z, y, (), s) for n, z, y, s in zip(NAMES, Z, Y0, SCORES)))


def random_sample(rng, n_t, n_c, covariates=0, strata=None) -> Sample:
    scores = rng.uniform(0.02, 0.98, n_t + n_c)
    z = [1] * n_t + [0] * n_c
    units = tuple(
        Unit(f"u{i}", zz, float(rng.normal()), tuple(rng.normal(size=covariates)), float(s))
        for i, (zz, s) in enumerate(zip(z, scores))
    )
    labels = None if strata is None else tuple(str(rng.integers(0, strata)) for _ in units)
    return Sample(units, labels)


@pytest.fixture
def fig1():
    return figure1_sample()


@pytest.fixture
def fig1_design(fig1):
    return optimal_pair_match(fig1)


@pytest.fixture
def fig1_csv():
    return os.path.join(DATA, "figure1.csv")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
