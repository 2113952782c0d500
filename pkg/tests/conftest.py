"""Shared fixtures: preset experiments are solved once per session."""

import re
from functools import lru_cache

import numpy as np
import pytest

from convexfeller import config as cfg
from convexfeller.model import ConstantSigma, DiffusionSpec
from convexfeller.pde import solve_semilinear
from convexfeller.procedure import backward_induction


@lru_cache(maxsize=None)
def experiment(name, level=0):
    return cfg.build(cfg.preset(name)).refined(level)


@lru_cache(maxsize=None)
def value_field(name, level=0):
    exp = experiment(name, level)
    return backward_induction(exp.problem(), exp.payoff, exp.grid)


@lru_cache(maxsize=None)
def pde_field(name, level=0, scheme="explicit-upwind"):
    exp = experiment(name, level)
    return solve_semilinear(exp.diffusion, exp.generator(), exp.payoff, exp.grid, scheme,
                            problem=exp.problem())


@pytest.fixture
def unit_diffusion():
    return DiffusionSpec(1, ConstantSigma([[1.0]]), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, filled by test_acceptance and printed at the end
ACCEPTANCE = {}


def report(criterion, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", str(k)).group()), str(k))):
        terminalreporter.write_line(ACCEPTANCE[key])
