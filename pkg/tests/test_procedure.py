import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexfeller.controls import ConstantSelector, constant_control, zero_control
from convexfeller.errors import UnstableStep
from convexfeller.model import (BallSet, ConstantSigma, DiffusionSpec, GridSpec, PointSet,
                                PowerPenalty, ZeroPenalty, control_set_sample)
from convexfeller.procedure import (ControlProblem, PayoffSpec, ProcedureEngine,
                                    backward_induction, ceiling_sweep, check_axioms,
                                    check_feller_modulus, check_nested_time_consistency,
                                    check_penalty_cocycle, check_time_consistency, mc_value,
                                    policy_control, random_payoff_pairs, relative_error,
                                    stencil_for, time_consistency_all)

from conftest import experiment, value_field

CLOSED = ["linear-fk", "ball-sublinear", "power-penalty"]


@pytest.mark.parametrize("name", CLOSED)
def test_closed_form_presets(name):
    exp = experiment(name)
    assert relative_error(exp.grid, value_field(name).values, exp.exact()) <= 0.01


@pytest.mark.parametrize("name", CLOSED + ["ball-wave"])
def test_time_consistency(name):
    vf = value_field(name)
    assert time_consistency_all(vf) <= 1e-10
    assert check_time_consistency(vf, vf.grid.t0) == 0.0
    times = vf.grid.times
    assert check_nested_time_consistency(vf, times[10], times[20]) <= 1e-10


def test_terminal_slice_is_payoff():
    vf = value_field("ball-wave")
    assert np.array_equal(vf.values[-1], vf.terminal.on_grid(vf.grid))
    assert check_feller_modulus(vf).terminal_gap == 0.0


def test_feller_lipschitz_under_ball_control():
    # h is 1-Lipschitz, g = 0: same-noise coupling keeps the Lipschitz constant <= 1
    exp = experiment("ball-sublinear")
    problem = exp.problem()
    payoff = PayoffSpec("tanh", width=1.0)
    rep = check_feller_modulus(backward_induction(problem, payoff, exp.grid))
    assert rep.max_lipschitz <= 1.0 + 1e-9


def test_feller_square_root_modulus():
    exp = experiment("linear-fk")
    vf = backward_induction(exp.problem(), PayoffSpec.call(0.0), exp.grid)
    rep = check_feller_modulus(vf)
    assert np.all(rep.sup_gap <= rep.constant * np.sqrt(rep.lags) + 1e-12)
    assert rep.exponent == pytest.approx(0.5, abs=0.1)


def test_mc_base_measure_matches_heat_moment(unit_diffusion):
    grid = experiment("linear-fk").grid
    ctrl = zero_control(1, grid.t0, grid.t1, grid.lo, grid.hi)
    est = mc_value(unit_diffusion, ctrl, ZeroPenalty(), PayoffSpec.power(2), grid.t0, [0.3], grid,
                   100_000, seed=3)
    assert abs(est.mean - (0.09 + 0.25)) <= 4 * est.stderr


@pytest.mark.parametrize("lam", [0.0, 0.4, 1.0, 2.5])
def test_mc_dominated_by_value(unit_diffusion, lam):
    exp = experiment("power-penalty")
    grid, vf = exp.grid, value_field("power-penalty")
    ctrl = constant_control(ConstantSelector([lam]), grid.t0, grid.t1, grid.lo, grid.hi,
                            control_set=exp.control_set)
    est = mc_value(unit_diffusion, ctrl, exp.penalty, exp.payoff, grid.t0, [0.2], grid, 20_000,
                   seed=8, control_set=exp.control_set)
    assert est.mean <= vf.at(grid.t0, [0.2])[0] + 4 * est.stderr + 0.01


def test_argmax_policy_replay(unit_diffusion):
    exp = experiment("power-penalty")
    grid, vf = exp.grid, value_field("power-penalty")
    est = mc_value(unit_diffusion, policy_control(vf), exp.penalty, exp.payoff, grid.t0, [0.2],
                   grid, 20_000, seed=9, control_set=exp.control_set)
    assert abs(est.mean - vf.at(grid.t0, [0.2])[0]) <= 4 * est.stderr + 0.01


def test_penalty_cocycle_procedure_level():
    vf = value_field("power-penalty")
    for k in (1, 17, 25, 49):
        rep = check_penalty_cocycle(vf, vf.grid.times[k])
        assert rep.additivity_error <= 1e-12
        assert rep.decomposition_error <= 1e-12


@pytest.mark.parametrize("name", CLOSED)
def test_axioms_hold(name):
    exp = experiment(name)
    engine = ProcedureEngine(exp.problem(), exp.grid)
    rep = check_axioms(engine, random_payoff_pairs(exp.grid, 3, seed=1))
    assert rep.passed


def test_constant_payoff_is_fixed():
    exp = experiment("power-penalty")
    vf = backward_induction(exp.problem(), PayoffSpec.constant(0.7), exp.grid)
    np.testing.assert_allclose(vf.values, 0.7, atol=1e-12)


def test_sublinear_homogeneity():
    exp = experiment("ball-sublinear")
    one = backward_induction(exp.problem(), PayoffSpec("linear"), exp.grid).values
    two = backward_induction(exp.problem(), PayoffSpec("linear", scale=2.0), exp.grid).values
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


def test_power_penalty_one_step_brute_force(unit_diffusion):
    # one step from x: Pi(theta x) = theta x + max_lam (theta lam - lam^2 / 2) dt
    dt = 0.01
    grid = GridSpec(0.0, dt, 1, (-2.0,), (2.0,), (81,), 40)
    problem = ControlProblem(unit_diffusion, BallSet(1, 4.0), PowerPenalty(2))
    lattice = control_set_sample(problem.control_set, 0.0, np.zeros(1), 40)[:, 0]
    inner = grid.inner_mask(0.5)
    for theta in (0.5, 1.0, 2.0):
        v = backward_induction(problem, PayoffSpec("linear", scale=theta), grid).values[0]
        brute = grid.nodes[:, 0] * theta + np.max(theta * lattice - lattice ** 2 / 2) * dt
        np.testing.assert_allclose(v[inner], brute[inner], atol=1e-12)
    # convex but not positively homogeneous
    v1 = backward_induction(problem, PayoffSpec("linear"), grid).values[0]
    v2 = backward_induction(problem, PayoffSpec("linear", scale=2.0), grid).values[0]
    assert np.all(v2[inner] > 2 * v1[inner])


def test_ceiling_sweep_converges():
    exp = experiment("linear-fk")
    sweep = ceiling_sweep(exp.problem(), PayoffSpec.power(2), exp.grid, [0.0],
                          [0.5, 2.0, 8.0, 32.0])
    assert sweep.nondecreasing and sweep.converged
    assert sweep.values[-1] == pytest.approx(0.25, rel=0.01)


def test_kappa_override_below_sqrt_n_rejected(unit_diffusion):
    grid = GridSpec(0.0, 0.1, 2, (-1.0,), (1.0,), (11,))
    problem = ControlProblem(unit_diffusion, PointSet(1), ZeroPenalty(), kappa=0.5)
    with pytest.raises(UnstableStep):
        backward_induction(problem, PayoffSpec("linear"), grid)


@settings(max_examples=30, deadline=None)
@given(sigma=st.floats(0.2, 3.0), dt=st.floats(1e-4, 0.05), nx=st.integers(21, 101),
       drift=st.floats(-1.0, 1.0))
def test_stencil_moments(sigma, dt, nx, drift):
    diff = DiffusionSpec(1, ConstantSigma([[sigma]]), sigma)
    grid = GridSpec(0.0, dt, 1, (-1.0,), (1.0,), (nx,))
    problem = ControlProblem(diff, BallSet(1, 2.0), ZeroPenalty())
    X = grid.nodes
    lam = np.full((grid.n_nodes, 1, 1), drift)
    idx, w = stencil_for(problem, grid, 0.0, dt, lam)
    d = grid.nodes[idx[:, 0], 0] - X[:, :1]
    w = w[:, 0]
    reach = np.max(np.where(w > 0, np.abs(d), 0.0), axis=1)
    ok = (X[:, 0] - reach > -1.0 + 1e-12) & (X[:, 0] + reach < 1.0 - 1e-12)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1.0)
    m = sigma * drift * dt
    np.testing.assert_allclose(np.sum(w * d, axis=1)[ok], m, atol=1e-12)
    var = sigma ** 2 * dt
    np.testing.assert_allclose(np.sum(w * (d - m) ** 2, axis=1)[ok], var, rtol=1e-9,
                               atol=(2.0 / (nx - 1)) ** 2 * 1e-9 + abs(m) * 4.0 / (nx - 1))


def test_fourth_moment_matched_on_fine_grid(unit_diffusion):
    grid = GridSpec(0.0, 0.01, 1, (-1.0,), (1.0,), (201,))
    problem = ControlProblem(unit_diffusion, PointSet(1), ZeroPenalty())
    idx, w = stencil_for(problem, grid, 0.0, 0.01, np.zeros((grid.n_nodes, 1, 1)))
    k = grid.n_nodes // 2
    d = grid.nodes[idx[k, 0], 0] - grid.nodes[k, 0]
    assert np.sum(w[k, 0] * d ** 2) == pytest.approx(0.01, rel=1e-12)
    assert np.sum(w[k, 0] * d ** 4) == pytest.approx(3 * 0.01 ** 2, rel=1e-9)


def test_random_payoffs_deterministic():
    grid = experiment("linear-fk").grid
    a, b = random_payoff_pairs(grid, 2, seed=4), random_payoff_pairs(grid, 2, seed=4)
    assert all(np.array_equal(x, y) for p, q in zip(a, b) for x, y in zip(p, q))
