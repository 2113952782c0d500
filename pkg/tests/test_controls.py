import numpy as np
import pytest

from convexfeller.controls import (ClippedAffineSelector, ConstantSelector, MarkovControl,
                                   bifurcate, compose, constant_control,
                                   enumerate_feedback_controls, zero_control)
from convexfeller.errors import IncompatiblePrefix, OffDomain
from convexfeller.model import BallSet, GridSpec, PointSet

GRID = GridSpec(0.0, 1.0, 16, (-3.0,), (3.0,), (13,), 2)
BALL = BallSet(1, 1.0)
STATES = np.linspace(-3.0, 3.0, 9)[:, None]


def values(ctrl, u, X=STATES):
    return ctrl.evaluate(u, X, lambda tau: X)


@pytest.fixture
def half():
    return constant_control(ConstantSelector([0.5]), 0.0, 1.0, GRID.lo, GRID.hi, control_set=BALL)


@pytest.fixture
def zero():
    return zero_control(1, 0.0, 1.0, GRID.lo, GRID.hi)


def test_zero_control_is_base_measure(zero):
    assert np.all(values(zero, 0.3) == 0.0)
    assert zero.control_id == "zero"


def test_projection_selector_is_valid():
    sel = ClippedAffineSelector([[1.0]], [0.0], BALL)
    ctrl = constant_control(sel, 0.0, 1.0, GRID.lo, GRID.hi, control_set=BALL)
    lam = values(ctrl, 0.4)
    assert np.all(BALL.contains(0.4, STATES, lam))
    np.testing.assert_allclose(lam[:, 0], np.clip(STATES[:, 0], -1, 1))


def test_extreme_constant_is_valid_and_outside_rejected():
    constant_control(ConstantSelector([1.0]), 0.0, 1.0, GRID.lo, GRID.hi, control_set=BALL)
    with pytest.raises(OffDomain):
        constant_control(ConstantSelector([1.5]), 0.0, 1.0, GRID.lo, GRID.hi, control_set=BALL)


def test_bifurcate_same_control_is_identity(half):
    b = bifurcate(half, half, 0.5, (-1.0,), (1.0,))
    for u in (0.1, 0.6, 0.9):
        np.testing.assert_array_equal(values(b, u), values(half, u))


def test_bifurcate_regions(half, zero):
    pasted = compose(half, zero, 0.5)  # zero before 0.5, half after
    whole = bifurcate(pasted, zero, 0.5, GRID.lo, GRID.hi)
    empty = bifurcate(pasted, zero, 0.5, (5.0,), (6.0,))
    inner = bifurcate(pasted, zero, 0.5, (-1.0,), (1.0,))
    for u in (0.1, 0.7):
        np.testing.assert_array_equal(values(whole, u), values(pasted, u))
        np.testing.assert_array_equal(values(empty, u), values(zero, u))
    lam = values(inner, 0.7)[:, 0]
    inside = (STATES[:, 0] >= -1.0) & (STATES[:, 0] < 1.0)
    assert np.all(lam[inside] == 0.5) and np.all(lam[~inside] == 0.0)
    assert inner.validate()


def test_bifurcate_rejects_different_prefix(half, zero):
    with pytest.raises(IncompatiblePrefix):
        bifurcate(half, zero, 0.5, (-1.0,), (1.0,))


def test_compose_identities(half, zero):
    assert compose(half, half, 0.5).same_as(half)
    assert compose(half, zero, 0.0).same_as(half)
    assert compose(half, zero, 1.0).same_as(zero)
    mid = compose(half, zero, 0.5)
    assert np.all(values(mid, 0.25) == 0.0) and np.all(values(mid, 0.75) == 0.5)


def test_control_roundtrip_json(half, zero):
    ctrl = bifurcate(compose(half, zero, 0.5), zero, 0.5, (-1.0,), (1.0,))
    back = MarkovControl.from_dict(ctrl.to_dict())
    assert back.same_as(ctrl)
    np.testing.assert_array_equal(values(back, 0.8), values(ctrl, 0.8))


def test_feedback_lattice_counts():
    assert enumerate_feedback_controls(PointSet(1), GRID).count == 1
    one = enumerate_feedback_controls(BALL, GRID, time_indices=[0], node_indices=[4])
    assert one.count == 3
    _, _, choices = next(iter(one))
    assert sorted(choices[:, 0]) == [-1.0, 0.0, 1.0]
    many = enumerate_feedback_controls(BALL, GRID, time_indices=[0, 1], node_indices=[2, 3, 4])
    assert many.count == 3 ** 6
