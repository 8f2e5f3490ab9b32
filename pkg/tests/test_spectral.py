import math

import numpy as np
import pytest

from kestenlab import (
    InterpolationOutOfRange,
    ModelSpec,
    NoConvergence,
    NoRoot,
    ShiftedKernel,
    SphereGrid,
    apply_adjoint,
    apply_transfer,
    duality_residual,
    eigenvalue,
    find_alpha,
    lambda_prime,
    lambda_prime_mc,
    make_grid,
    make_rng,
    solve_alpha,
    solve_eigen,
)

from conftest import PERRON, lowvar2, scalar1, scalar2, scaled_fib

LN2, LN3 = math.log(2), math.log(3)


def grid_tolerance(grid: SphereGrid) -> float:
    """Interpolation error scale of a piecewise-linear grid."""
    return grid.spacing**2


# grid


@pytest.mark.parametrize("dim,size", [(1, 1), (2, 513), (3, 49 * 49)])
def test_grid_nodes_are_unit_and_nonnegative(dim, size):
    g = SphereGrid(dim)
    assert g.size == size
    assert np.all(g.nodes >= 0)
    np.testing.assert_allclose(np.abs(g.nodes).sum(axis=1), 1.0, atol=1e-14)


def test_grid_weights_cover_the_chart():
    assert SphereGrid(2).weights.sum() == pytest.approx(math.pi / 2)


def test_interpolation_reproduces_linear_functions_of_angle():
    g = SphereGrid(2, 65)
    f = g.angles(g.nodes)[:, 0]
    x = np.random.default_rng(0).dirichlet([1, 1], size=50)
    np.testing.assert_allclose(g.interpolate(f, x), g.angles(x)[:, 0], atol=1e-12)


def test_points_off_the_cone_raise():
    with pytest.raises(InterpolationOutOfRange):
        SphereGrid(2).stencil(np.array([[-0.5, 1.5]]))


# transfer operator


def test_scalar_transfer_closed_form():
    g = make_grid(scalar2())
    assert apply_transfer(scalar2(), g, 2.0, np.ones(1))[0] == pytest.approx(0.4 * 4 + 0.6 / 9)


@pytest.mark.parametrize("spec", [scalar2(), scaled_fib(), lowvar2()])
def test_transfer_at_zero_preserves_constants(spec):
    g = make_grid(spec)
    np.testing.assert_allclose(apply_transfer(spec, g, 0.0, np.ones(g.size)), 1.0, atol=1e-12)


def test_scalar_multiple_of_identity_scales():
    c = 0.7
    spec = ModelSpec.from_arrays([1.0], [c * np.eye(2)], [[1.0, 1.0]])
    g = make_grid(spec, 65)
    f = np.cos(g.angles(g.nodes)[:, 0])
    np.testing.assert_allclose(apply_transfer(spec, g, 1.5, f), c**1.5 * f, rtol=1e-12)


def test_adjoint_uses_transposed_matrices():
    spec = lowvar2()
    flipped = ModelSpec.from_arrays(spec.probs, spec.mats.transpose(0, 2, 1), spec.qs)
    g = make_grid(spec, 33)
    f = np.random.default_rng(3).random(g.size)
    np.testing.assert_allclose(apply_adjoint(spec, g, 0.8, f), apply_transfer(flipped, g, 0.8, f), rtol=1e-12)


def test_negative_theta_rejected():
    with pytest.raises(ValueError):
        apply_transfer(scalar2(), make_grid(scalar2()), -1.0, np.ones(1))


# eigendata


def test_scalar2_eigendata_at_one():
    sol = solve_eigen(scalar2(), make_grid(scalar2()), 1.0)
    assert sol.lam == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(sol.r, 1.0)
    np.testing.assert_allclose(sol.l, 1.0)


def test_scaled_fib_common_direction_oracle():
    spec = scaled_fib()
    sol = solve_eigen(spec, make_grid(spec), 1.0)
    assert sol.lam == pytest.approx(0.625 * (1 + 5**0.5) / 2, abs=5e-3)
    near = sol.grid.angular_distance(sol.grid.nodes, PERRON[None, :]) <= 0.05
    assert sol.l[near].sum() >= 0.9


@pytest.mark.parametrize("spec", [scalar2(), scaled_fib(), lowvar2()])
def test_theta_zero_is_trivial(spec):
    sol = solve_eigen(spec, make_grid(spec), 0.0)
    assert sol.lam == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sol.r, 1.0, atol=1e-10)


@pytest.mark.parametrize("spec", [scaled_fib(), lowvar2()])
def test_eigendata_invariants(spec):
    tol = 1e-11
    sol = solve_eigen(spec, make_grid(spec), 0.9, tol=tol)
    assert np.all(sol.r > 0)
    assert np.all(sol.l >= 0) and sol.l.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.dot(sol.r, sol.l) == pytest.approx(1.0, abs=1e-8)
    assert sol.residual <= 10 * tol and sol.adjoint_residual <= 10 * tol
    assert sol.lam_star == pytest.approx(sol.lam, rel=1e-9)


def test_no_convergence_reports_residual():
    spec = lowvar2()
    with pytest.raises(NoConvergence) as info:
        solve_eigen(spec, make_grid(spec), 1.0, max_iter=2)
    assert info.value.residual > 0


def test_three_dimensional_common_direction():
    b = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 4
    spec = ModelSpec.from_arrays([0.5, 0.5], [b, 0.3 * b], [[1.0, 1.0, 1.0]] * 2)
    g = make_grid(spec)
    # spectral radius of b is 1 with Perron direction (1,1,1)/3
    assert eigenvalue(spec, g, 1.0) == pytest.approx(0.65, abs=1e-6)
    assert eigenvalue(spec, g, 0.0) == pytest.approx(1.0, abs=1e-12)


# alpha and the drift


def test_alpha_scalar2():
    g = make_grid(scalar2())
    assert find_alpha(scalar2(), g, bracket=(0.5, 2.0)) == pytest.approx(1.0, abs=1e-4)


def test_alpha_scalar1():
    assert find_alpha(scalar1(), make_grid(scalar1())) == pytest.approx(1.0, abs=1e-4)


def test_alpha_scaled_fib_by_construction():
    spec = scaled_fib(0.490712)
    assert find_alpha(spec, make_grid(spec)) == pytest.approx(1.0, abs=5e-3)


def test_bad_bracket_raises():
    with pytest.raises(NoRoot):
        find_alpha(scalar2(), make_grid(scalar2()), bracket=(2.0, 3.0))


def test_lambda_prime_closed_forms():
    assert lambda_prime(scalar2(), make_grid(scalar2()), 1.0) == pytest.approx(0.8 * LN2 - 0.2 * LN3, abs=1e-3)
    assert lambda_prime(scalar1(), make_grid(scalar1()), 1.0) == pytest.approx(LN2 / 3, abs=1e-3)


def test_lambda_prime_monte_carlo_cross_check():
    sol = solve_alpha(scalar2())
    mean, se = lambda_prime_mc(ShiftedKernel(scalar2(), sol), 100_000, make_rng(7))
    assert abs(mean - sol.lambda_prime) < 3 * se


def test_lambda_prime_mc_two_dimensional():
    spec = lowvar2()
    sol = solve_alpha(spec)
    mean, se = lambda_prime_mc(ShiftedKernel(spec, sol), 200_000, make_rng(8))
    assert abs(mean - sol.lambda_prime) < 4 * se


@pytest.mark.parametrize("spec", [scaled_fib(), lowvar2()])
def test_duality_relation(spec):
    sol = solve_alpha(spec)
    tol = grid_tolerance(sol.grid)
    assert duality_residual(sol) < 5 * tol
    assert duality_residual(sol, swapped=True) < 5 * tol


@pytest.mark.parametrize("spec", [scalar2(), scaled_fib(), lowvar2()])
def test_log_lambda_is_convex(spec):
    g = make_grid(spec, 129)
    thetas = np.linspace(0.0, 2.0, 21)
    lam = np.log([eigenvalue(spec, g, t) for t in thetas])
    assert np.all(np.diff(lam, 2) >= -1e-8)


@pytest.mark.parametrize("spec", [scaled_fib(), lowvar2()])
def test_grid_refinement(spec):
    g = make_grid(spec)
    sol = solve_alpha(spec, g)
    fine = make_grid(spec, 2 * (g.size - 1) + 1)
    assert abs(eigenvalue(spec, fine, sol.alpha) - 1.0) < grid_tolerance(g)


def test_solution_record():
    d = solve_alpha(scalar2()).to_dict()
    assert set(d) >= {"alpha", "lambda", "lambda_prime", "residual", "grid_size"}
