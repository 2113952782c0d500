import numpy as np
import pytest

from convexfeller.conjugate import ZeroConjugate
from convexfeller.errors import CflViolation, GridMismatch
from convexfeller.pde import (cfl_substeps, compare_fields, residual_check, scheme_tolerance,
                              solve_semilinear)
from convexfeller.procedure import PayoffSpec, relative_error

from conftest import experiment, pde_field, value_field

CLOSED = ["linear-fk", "ball-sublinear", "power-penalty"]
SMOOTH = ["ball-wave", "quadratic-softplus"]


@pytest.mark.parametrize("scheme", ["explicit-upwind", "semi-implicit"])
@pytest.mark.parametrize("name", CLOSED)
def test_closed_forms(name, scheme):
    exp = experiment(name)
    assert relative_error(exp.grid, pde_field(name, 0, scheme).values, exp.exact()) <= 0.01


@pytest.mark.parametrize("name", CLOSED)
def test_equivalence_mode_matches_procedure(name):
    diff = np.abs(pde_field(name, 0, "equivalence").values - value_field(name).values)
    assert np.max(diff) <= 1e-10


@pytest.mark.parametrize("name,tol", [("linear-fk", 0.01), ("ball-sublinear", 0.02),
                                      ("power-penalty", 0.02)])
def test_route_agreement(name, tol):
    assert compare_fields(value_field(name), pde_field(name)).relative <= tol


def test_compare_requires_same_grid():
    with pytest.raises(GridMismatch):
        compare_fields(value_field("linear-fk"), pde_field("ball-wave"))


@pytest.mark.parametrize("name", CLOSED + SMOOTH)
def test_residual_of_exact_solution_shrinks(name):
    floor = 1e-10
    sizes = []
    for level in (0, 1):
        exp = experiment(name, level)
        rep = residual_check(exp.exact(), exp.diffusion, exp.generator(), grid=exp.grid)
        sizes.append(max(abs(rep.min), abs(rep.max)))
    assert sizes[1] <= floor or sizes[0] / sizes[1] >= 1.5


def test_constant_field_has_zero_residual(unit_diffusion):
    grid = experiment("linear-fk").grid
    values = np.full((grid.nt + 1, grid.n_nodes), 0.3)
    rep = residual_check(values, unit_diffusion, ZeroConjugate(1), grid=grid)
    assert rep.max == 0.0 and rep.min == 0.0


@pytest.mark.parametrize("name", CLOSED + SMOOTH)
def test_value_field_is_supersolution(name):
    exp = experiment(name)
    vf = value_field(name)
    rep = residual_check(vf, exp.diffusion, exp.generator())
    assert rep.supersolution
    assert rep.tolerance == pytest.approx(scheme_tolerance(exp.grid, vf.values))


@pytest.mark.parametrize("name", SMOOTH)
def test_first_order_convergence(name):
    errs = []
    for level in (0, 1):
        exp = experiment(name, level)
        errs.append(relative_error(exp.grid, pde_field(name, level).values, exp.exact()))
    assert errs[0] / errs[1] >= 1.5


def test_explicit_substeps_too_small_rejected():
    exp = experiment("power-penalty")
    need = cfl_substeps(exp.diffusion, exp.generator(), exp.grid)
    assert need > 1
    with pytest.raises(CflViolation):
        solve_semilinear(exp.diffusion, exp.generator(), exp.payoff, exp.grid, "explicit-upwind",
                         substeps=1)


def test_monotone_weights_reported():
    field = pde_field("power-penalty")
    assert field.min_weight >= 0.0
    assert field.substeps >= 1


def test_payoff_array_accepted():
    exp = experiment("linear-fk")
    h = PayoffSpec.power(2).on_grid(exp.grid)
    a = solve_semilinear(exp.diffusion, exp.generator(), h, exp.grid, "semi-implicit")
    np.testing.assert_array_equal(a.values, pde_field("linear-fk", 0, "semi-implicit").values)
