import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexfeller.conjugate import (BallConjugate, LatticeConjugate, PowerConjugate,
                                    SubspacePowerConjugate, check_Hg, eval_g,
                                    fenchel_closed_stochvol, fenchel_numeric,
                                    stochvol_conjugate_exact)
from convexfeller.errors import DomainError, GrowthViolation
from convexfeller.model import (BallSet, ConstantPenalty, LinearConstraintSet, PowerPenalty,
                                ZeroPenalty)

X1, X2 = np.zeros(1), np.zeros(2)


def test_eval_g_examples():
    assert eval_g(PowerPenalty(2), BallSet(2, 5.0), 0.0, X2, [0.0, 0.0]) == 0.0
    assert eval_g(PowerPenalty(2), BallSet(2, 5.0), 0.0, X2, [0.0, 2.0]) == pytest.approx(2.0)
    assert eval_g(ZeroPenalty(), BallSet(2, 1.0), 0.0, X2, [2.0, 0.0]) == math.inf


def test_fenchel_linear_on_ball():
    res = fenchel_numeric(ZeroPenalty(), BallSet(1, 2.0), 0.0, X1, 3.0)
    assert res.value == pytest.approx(6.0)
    np.testing.assert_allclose(res.argmax, [2.0])


def test_fenchel_quadratic():
    res = fenchel_numeric(PowerPenalty(2), BallSet(1, 10.0), 0.0, X1, 3.0, resolution=20, depth=6)
    assert res.value == pytest.approx(4.5, abs=1e-9)
    np.testing.assert_allclose(res.argmax, [3.0], atol=1e-6)


def test_fenchel_stochvol_rho_zero_brute_force():
    # independent oracle: 1-D grid over nu in [-1, 1] at step 1e-4, alpha = 0
    nu = np.arange(-10000, 10001) * 1e-4
    brute = np.max(0.5 * nu - nu ** 2 / 2)
    res = fenchel_numeric(PowerPenalty(2), LinearConstraintSet(1, 0.0, 1.0), 0.0, X2,
                          [0.0, 0.5], resolution=20, depth=8)
    assert res.value == pytest.approx(brute, abs=1e-8)
    assert res.value == pytest.approx(0.125, abs=1e-9)
    np.testing.assert_allclose(res.argmax, [0.0, 0.5], atol=1e-6)


def test_fenchel_numeric_is_lower_bound_and_monotone_in_depth():
    g, cs = PowerPenalty(3), BallSet(2, 2.0)
    z = np.array([0.9, -1.3])
    values = [fenchel_numeric(g, cs, 0.0, X2, z, resolution=6, depth=d).value for d in range(6)]
    assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
    exact = PowerConjugate(3, 2.0)(0.0, X2[None], z[None])[0][0]
    assert max(values) <= exact + 1e-12


def test_closed_stochvol_branches():
    assert fenchel_closed_stochvol(2, 1.0, 0.0, [0.3, 0.0]) == pytest.approx(0.045)
    assert fenchel_closed_stochvol(2, 1.0, 0.0, [0.0, 0.0]) == 0.0
    assert fenchel_closed_stochvol(2, 1.0, 0.0, [2.0, 0.0]) == pytest.approx(1.5)


def test_closed_stochvol_domain():
    with pytest.raises(DomainError):
        fenchel_closed_stochvol(1.0, 1.0, 0.0, [1.0, 0.0])
    with pytest.raises(DomainError):
        fenchel_closed_stochvol(2.0, 1.0, 1.0, [1.0, 0.0])


@pytest.mark.parametrize("rho", [-0.6, 0.0, 0.3, 0.8])
def test_exact_stochvol_conjugate_matches_numeric(rho):
    cs = LinearConstraintSet(1, rho, 1.5)
    rng = np.random.default_rng(3)
    for z in rng.normal(size=(8, 2)) * 1.5:
        num = fenchel_numeric(PowerPenalty(2), cs, 0.0, X2, z, resolution=40, depth=16).value
        assert num == pytest.approx(stochvol_conjugate_exact(2, 1.5, rho, z), abs=1e-9)


def test_closed_form_agrees_with_exact_only_at_rho_zero():
    z = np.array([0.4, 0.9])  # (z_alpha, z_nu)
    at_zero = fenchel_closed_stochvol(2, 1.0, 0.0, z[::-1])
    assert at_zero == pytest.approx(stochvol_conjugate_exact(2, 1.0, 0.0, z))
    off = fenchel_closed_stochvol(2, 1.0, 0.5, z[::-1])
    assert abs(off - stochvol_conjugate_exact(2, 1.0, 0.5, z)) > 1e-3


@settings(max_examples=40, deadline=None)
@given(z=st.floats(-4, 4), x=st.floats(-2, 2))
def test_subspace_generator_matches_lattice(z, x):
    cs = LinearConstraintSet(1, 0.4, 1.0, phi_growth=True)
    X = np.array([[x, 0.5]])
    Z = np.array([[0.3, z]])
    closed, lam = SubspacePowerConjugate(cs, 2.0)(0.0, X, Z)
    lattice, _ = LatticeConjugate(cs, PowerPenalty(2), 400)(0.0, X, Z)
    assert lattice[0] <= closed[0] + 1e-12
    assert closed[0] - lattice[0] <= 1e-3 * (1 + abs(closed[0]))
    assert cs.contains(0.0, X, lam)[0]


def test_fenchel_young_random_pairs():
    rng = np.random.default_rng(11)
    cases = [(BallConjugate(1.5), ZeroPenalty(), BallSet(1, 1.5), 1),
             (PowerConjugate(2.0, 10.0), PowerPenalty(2), BallSet(1, 10.0), 1),
             (PowerConjugate(3.0, 2.0), PowerPenalty(3), BallSet(2, 2.0), 2)]
    for f, g, cs, d in cases:
        Z = rng.normal(size=(10_000, d)) * 3
        lam = cs.project(0.0, np.zeros(d), rng.normal(size=(10_000, d)) * 3)
        X = np.zeros((10_000, d))
        fz, _ = f(0.0, X, Z)
        gl = g(0.0, X, lam)
        assert np.all(np.sum(Z * lam, axis=1) <= fz + gl + 1e-9)


def test_check_hg_examples():
    nodes = [(0.0, np.array([x])) for x in np.linspace(-3, 3, 7)]
    rep = check_Hg(ZeroPenalty(), BallSet(1, 1.0), nodes)
    assert rep.passed and rep.max_ratio == 0.0
    rep = check_Hg(ConstantPenalty(0.7), BallSet(1, 1.0), nodes, C_g=0.7, m=0)
    assert rep.passed and rep.C_g == 0.7 and rep.m == 0


def test_check_hg_power_on_growth_set():
    C = 0.8
    cs = LinearConstraintSet(1, 0.2, C, phi_growth=True)
    nodes = [(0.0, np.array([s, y])) for s in np.linspace(-3, 3, 5) for y in (-1.0, 1.0)]
    # |lam|^2 <= C (1 + |x|) so g = |lam|^2 / 2 <= C (1 + |x|) / 2
    rep = check_Hg(PowerPenalty(2), cs, nodes, C_g=C / 2, m=1)
    assert rep.passed
    with pytest.raises(GrowthViolation):
        check_Hg(PowerPenalty(2), cs, nodes, C_g=C / 4, m=1)
