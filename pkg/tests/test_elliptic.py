import numpy as np
import pytest

from gradvi import (
    BoundField,
    EllipticProblem,
    Grid,
    PenaltyParams,
    complementarity_residual,
    dependence_study,
    equivalence_report,
    gradient,
    recover_multiplier,
    solve_degenerate,
    solve_double_obstacle,
    solve_vi,
    solve_vi_oracle,
    violation,
)
from gradvi.elliptic import feasible_test_fields, vi_residual
from gradvi.grid import cell_norms, field_norm, inner_nodes

from conftest import SEED

DEEP = PenaltyParams(eps=1e-9, schedule=(1e-1, 1e-3, 1e-5, 1e-7, 1e-9))


def counterexample_problem(n):
    grid = Grid.interval(-1.0, 1.0, n)
    g = BoundField.from_function(grid, lambda m: 3 * m**2)
    return grid, EllipticProblem(grid, 2.0, 1.0, 2.0 * np.ones(grid.shape), g)


def counterexample_closed_form(x):
    return np.where(np.abs(x) >= 2.0 / 3.0, 1 - x**2,
                    1 - np.abs(x) ** 3 - 4.0 / 27.0)


def torsion_problem(n, beta=2.0):
    grid = Grid.interval(-1.0, 1.0, n)
    return grid, EllipticProblem(
        grid, 2.0, 1.0, beta * np.ones(grid.shape), BoundField.constant(grid, 1.0)
    )


def test_zero_forcing_gives_zero(line):
    prob = EllipticProblem(line, 2.0, 1.0, np.zeros(line.shape),
                           BoundField.constant(line, 1.0))
    sol = solve_vi(prob)
    assert np.max(np.abs(sol.u)) < 1e-12
    assert np.allclose(sol.lam, prob.delta)


def test_counterexample_closed_form():
    grid, prob = counterexample_problem(401)
    sol = solve_vi(prob)
    x = grid.axes[0]
    err = np.max(np.abs(sol.u - counterexample_closed_form(x)))
    assert err <= 5 * grid.h[0]
    assert sol.u[200] == pytest.approx(23.0 / 27.0, abs=1e-3)
    assert not sol.flags["newton_failed"]
    assert not sol.flags["feasibility_failed"]


def test_small_instance_matches_oracle():
    grid = Grid.interval(-1.0, 1.0, 7)
    prob = EllipticProblem(grid, 2.0, 1.0, np.ones(grid.shape),
                           BoundField.constant(grid, 0.5))
    newton = solve_vi(prob, params=DEEP)
    admm = solve_vi_oracle(prob)
    assert np.max(np.abs(newton.u - admm.u)) <= 1e-6


def test_oracle_zero_forcing(square):
    prob = EllipticProblem(square, 2.0, 1.0, np.zeros(square.shape),
                           BoundField.constant(square, 1.0))
    sol = solve_vi_oracle(prob)
    assert np.max(np.abs(sol.u)) == 0.0


def test_oracle_sampled_optimality(square, rng):
    """The oracle's objective beats 100 random feasible fields (p = 3)."""
    X, Y = square.node_coords()
    f = 3.0 * np.sin(np.pi * X) * np.sin(np.pi * Y)
    prob = EllipticProblem(square, 3.0, 1.0, f, BoundField.constant(square, 0.7))
    sol = solve_vi_oracle(prob)
    obj = prob.objective(sol.u)
    fields = feasible_test_fields(square, prob.g, 100, seed=SEED)
    competitors = [prob.objective(w) for w in fields]
    assert obj <= min(competitors) + 1e-10


def test_oracle_agrees_with_newton_on_counterexample():
    grid, prob = counterexample_problem(201)
    newton = solve_vi(prob)
    admm = solve_vi_oracle(prob)
    assert np.max(np.abs(newton.u - admm.u)) <= 2 * grid.h[0]


def test_vi_residual_battery():
    grid, prob = torsion_problem(201)
    sol = solve_vi(prob, seed=SEED)
    assert sol.diagnostics["vi_residual_min"] >= -1e-6
    assert sol.diagnostics["violation_max"] <= 1e-4


def test_degenerate_limit_is_distance_cone():
    grid, _ = torsion_problem(201)
    prob = EllipticProblem(grid, 2.0, 0.0, 2.0 * np.ones(grid.shape),
                           BoundField.constant(grid, 1.0))
    sol = solve_degenerate(prob)
    x = grid.axes[0]
    assert np.max(np.abs(sol.u - (1 - np.abs(x)))) <= 1e-4
    assert sol.flags["nonunique"]
    assert violation(sol.u, prob.g, grid)[0] <= 1e-4


def test_degenerate_zero_forcing(line):
    prob = EllipticProblem(line, 2.0, 0.0, np.zeros(line.shape),
                           BoundField.constant(line, 1.0))
    sol = solve_degenerate(prob)
    assert violation(sol.u, prob.g, line)[0] <= 1e-6


def test_multiplier_sign_support_and_gap():
    grid, prob = torsion_problem(401)
    sol = solve_vi(prob)
    lam, gap = recover_multiplier(sol.u, prob, 1e-6)
    assert np.min(lam) >= prob.delta - 1e-12
    assert gap <= 1e-4
    # multiplier support matches the plastic set |grad u| >= 1 - tol
    s = cell_norms(gradient(sol.u, grid))
    active = lam > prob.delta + 1e-8
    assert np.all(s[active] >= 1.0 - 1e-6)
    x = grid.cell_centers()[0]
    assert np.all(np.abs(x[active]) >= 0.5 - 2 * grid.h[0])


def test_inactive_cells_have_lam_delta():
    grid, prob = torsion_problem(201)
    sol = solve_vi(prob)
    s = cell_norms(gradient(sol.u, grid))
    inactive = s < prob.g.values - 0.05
    assert np.allclose(sol.lam[inactive], prob.delta)


def test_double_obstacle_paper_case():
    grid = Grid.interval(-1.0, 1.0, 401)
    x = grid.axes[0]
    upper = 1 - np.abs(x) ** 3
    sol = solve_double_obstacle(2.0, 1.0, 2.0 * np.ones(grid.shape), upper,
                                -upper, grid)
    z = 1 - x**2
    assert np.max(np.abs(sol.u - z)) <= 0.01
    assert sol.u[200] == pytest.approx(1.0, abs=1e-3)


def test_double_obstacle_inactive_is_unconstrained(line):
    big = 1e9 * np.ones(line.shape)
    sol = solve_double_obstacle(2.0, 1.0, 2.0 * np.ones(line.shape), big,
                                -big, line)
    x = line.axes[0]
    assert np.max(np.abs(sol.u - (1 - x**2))) <= 1e-8


def test_double_obstacle_zero_forcing(line):
    x = line.axes[0]
    upper = 1 - np.abs(x)
    sol = solve_double_obstacle(2.0, 1.0, np.zeros(line.shape), upper,
                                -upper, line)
    assert np.max(np.abs(sol.u)) <= 1e-10


def test_double_obstacle_incompatible():
    grid = Grid.interval(0, 1, 11)
    with pytest.raises(ValueError):
        solve_double_obstacle(2.0, 1.0, np.zeros(grid.shape),
                              -np.ones(grid.shape), np.ones(grid.shape), grid)


def test_complementarity_counterexample_values():
    grid, prob = counterexample_problem(401)  # h = 1/200
    sol = solve_vi(prob)
    res = complementarity_residual(sol.u, prob)
    # -u'' - f = 6|x| - 2 on (1/3, 2/3); sup tends to 2
    assert res.sup >= 1.0
    # the double obstacle solution z = 1 - x^2: max(|z'| - g) = 1/3 at |x|=1/3
    x = grid.axes[0]
    z = 1 - x**2
    res_z = complementarity_residual(z, prob)
    assert res_z.sup == pytest.approx(1.0 / 3.0, abs=0.02)


def test_complementarity_smooth_unconstrained(line):
    x = line.axes[0]
    u = 1 - x**2
    prob = EllipticProblem(line, 2.0, 1.0, 2.0 * np.ones(line.shape),
                           BoundField.constant(line, 5.0))
    res = complementarity_residual(u, prob)
    assert abs(res.sup) <= 0.05  # -u'' - f = 0, constraint slack


def test_complementarity_rejects_p_not_2(line):
    prob = EllipticProblem(line, 3.0, 1.0, np.ones(line.shape),
                           BoundField.constant(line, 1.0))
    with pytest.raises(ValueError):
        complementarity_residual(np.zeros(line.shape), prob)


def test_equivalence_torsion_constant_g():
    grid, prob = torsion_problem(401)
    rep = equivalence_report(prob)
    assert rep.gap_vi_obstacle <= 5 * grid.h[0]
    assert rep.g_constant
    assert rep.laplacian_g2_nonpositive
    assert abs(rep.complementarity_vi.sup) <= 0.05


def test_equivalence_counterexample_gap():
    grid, prob = counterexample_problem(401)
    rep = equivalence_report(prob)
    mid = grid.shape[0] // 2
    gap_at_zero = rep.u_obstacle.u[mid] - rep.u_vi.u[mid]
    assert gap_at_zero == pytest.approx(4.0 / 27.0, abs=0.01)
    assert not rep.g_constant
    assert not rep.laplacian_g2_nonpositive
    assert rep.complementarity_vi.sup >= 1.0


def test_equivalence_zero_forcing():
    grid = Grid.interval(-1, 1, 101)
    prob = EllipticProblem(grid, 2.0, 1.0, np.zeros(grid.shape),
                           BoundField.constant(grid, 1.0))
    rep = equivalence_report(prob)
    assert np.max(np.abs(rep.u_vi.u)) <= 1e-10
    assert np.max(np.abs(rep.u_obstacle.u)) <= 1e-10


def test_dependence_study_zero_magnitude_gives_zero_error():
    grid, prob = torsion_problem(101)
    study = dependence_study(prob, "perturb-g", [1e-1, 1e-2, 1e-3, 0.0])
    assert study.errors[-1] == 0.0
    assert all(a > b for a, b in zip(study.errors[:-2], study.errors[1:-1]))


def test_dependence_study_slope_g_p2():
    grid, prob = torsion_problem(161)
    study = dependence_study(prob, "perturb-g", [1e-1, 1e-2, 1e-3])
    assert study.fitted_slope >= 0.5 - 0.1


def test_dependence_study_slope_f_p3():
    grid = Grid.interval(-1, 1, 81)
    prob = EllipticProblem(grid, 3.0, 1.0, 2.0 * np.ones(grid.shape),
                           BoundField.constant(grid, 1.0))
    study = dependence_study(prob, "perturb-f", [1.0, 1e-1, 1e-2])
    assert study.fitted_slope >= 1.0 / 3.0 - 0.1
    assert all(a > b for a, b in zip(study.errors, study.errors[1:]))


def test_dependence_study_mosco_mode():
    grid, prob = counterexample_problem(101)
    study = dependence_study(prob, "mosco", [1e-1, 1e-2, 1e-3])
    assert all(a > b for a, b in zip(study.errors, study.errors[1:]))
    assert study.errors[-1] <= 0.05


def test_dependence_study_validation(line):
    prob = EllipticProblem(line, 2.0, 1.0, np.ones(line.shape),
                           BoundField.constant(line, 1.0))
    with pytest.raises(ValueError):
        dependence_study(prob, "perturb-f", [1e-1, 1e-2])
    with pytest.raises(ValueError):
        dependence_study(prob, "nonsense", [1e-1, 1e-2, 1e-3])


def test_symmetry_of_symmetric_data_1d():
    # the forward-difference scheme is exactly mirror-equivariant in 1D
    grid = Grid.interval(-1, 1, 101)
    x = grid.axes[0]
    f = 2.0 * np.cos(0.5 * np.pi * x)
    prob = EllipticProblem(grid, 2.0, 1.0, f, BoundField.constant(grid, 0.5))
    sol = solve_vi(prob)
    assert np.max(np.abs(sol.u - sol.u[::-1])) <= 1e-11


def test_symmetry_of_symmetric_data_2d():
    # in 2D the lower-left anchor makes the scheme transpose-equivariant
    # exactly, while mirror equivariance breaks at O(h) inside the coupled
    # cell norm (the anchors of qx and qy pair up differently)
    grid = Grid.box((-1, 1), (-1, 1), 21, 21)
    X, Y = grid.node_coords()
    f = 2.0 * np.cos(0.5 * np.pi * X) * np.cos(0.5 * np.pi * Y)
    prob = EllipticProblem(grid, 2.0, 1.0, f, BoundField.constant(grid, 0.5))
    sol = solve_vi(prob)
    assert np.max(np.abs(sol.u - sol.u.T)) <= 1e-11
    assert np.max(np.abs(sol.u - sol.u[::-1, :])) <= 0.1 * max(grid.h)


def test_determinism_identical_runs():
    grid = Grid.box((-1, 1), (-1, 1), 15, 15)
    X, Y = grid.node_coords()
    f = 1.5 * np.cos(0.5 * np.pi * X) * np.cos(0.5 * np.pi * Y)
    prob = EllipticProblem(grid, 2.0, 1.0, f, BoundField.constant(grid, 0.5))
    a = solve_vi(prob)
    b = solve_vi(prob)
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.lam, b.lam)


def test_monotone_objective_in_g():
    """Enlarging g cellwise never decreases the attained objective value
    (the feasible set grows, p = 2, f >= 0)."""
    grid = Grid.interval(-1, 1, 101)
    f = 2.0 * np.ones(grid.shape)
    values = []
    for k in (0.5, 1.0, 2.0, 5.0):
        prob = EllipticProblem(grid, 2.0, 1.0, f, BoundField.constant(grid, k))
        sol = solve_vi(prob)
        values.append(prob.objective(sol.u))
    assert all(a >= b - 1e-10 for a, b in zip(values, values[1:]))


def test_solve_vi_rejects_degenerate_delta(line):
    prob = EllipticProblem(line, 2.0, 0.0, np.ones(line.shape),
                           BoundField.constant(line, 1.0))
    with pytest.raises(ValueError):
        solve_vi(prob)


def test_warm_start_consistency():
    grid, prob = torsion_problem(101)
    cold = solve_vi(prob)
    warm = solve_vi(prob, u_init=cold.u)
    assert np.max(np.abs(cold.u - warm.u)) <= 1e-8
