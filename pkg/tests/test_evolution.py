import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from gradvi import (
    BoundField,
    CertificateInconsistencyError,
    ConstantBound,
    EllipticProblem,
    Grid,
    NemytskiiBound,
    ParabolicProblem,
    TransportProblem,
    TrajectorySeparated,
    evolution_certificate,
    field_norm,
    gradient_energy_trajectory,
    l2_energy_trajectory,
    solve_degenerate,
    solve_parabolic_qvi,
    solve_parabolic_qvi_contraction,
    solve_parabolic_vi,
    solve_transport_vi,
    solve_vi,
    stability_study,
    step_implicit,
    transport_stationary,
    weak_residual,
)
from gradvi.evolution import a_p_constant, energy_inequality_slack

from conftest import SEED


def heat_problem(grid, g_value=1e9, T=0.1, tau=0.05, f=None):
    f = np.ones(grid.shape) if f is None else f
    return ParabolicProblem(grid, 2.0, 1.0, f, BoundField.constant(grid, g_value),
                            np.zeros(grid.shape), T, tau)


def test_step_zero_data(line):
    prob = heat_problem(line, T=0.1, tau=0.1, f=np.zeros(line.shape))
    out = step_implicit(np.zeros(line.shape), 0.1, prob)
    assert np.max(np.abs(out)) <= 1e-12


def test_step_matches_linear_heat_oracle():
    """With a huge bound the constraint never binds; the step must match an
    independently assembled implicit heat step (kron Laplacian)."""
    grid = Grid.box((0, 1), (0, 1), 21, 21)
    X, Y = grid.node_coords()
    f = np.sin(np.pi * X) * np.sin(np.pi * Y)
    tau = 0.05
    prob = heat_problem(grid, T=2 * tau, tau=tau, f=f)
    ts = solve_parabolic_vi(prob)
    n = grid.shape[0] - 2
    h = grid.h[0]
    one = sp.identity(n)
    lap1 = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n)) / h**2
    lap = sp.kron(lap1, one) + sp.kron(one, lap1)
    mat = (sp.identity(n * n) / tau + lap).tocsc()
    lu = spla.splu(mat)
    u = np.zeros(n * n)
    for _ in range(2):
        u = lu.solve(f[1:-1, 1:-1].ravel() + u / tau)
    assert np.max(np.abs(ts.final()[1:-1, 1:-1].ravel() - u)) <= 1e-8


def test_step_sandpile_barrier(line):
    """One implicit step of sandpile data stays below the capped cone."""
    x = line.axes[0]
    cone = 1.0 - np.abs(x)
    prob = ParabolicProblem(line, 2.0, 0.0, 5.0 * np.ones(line.shape),
                            BoundField.constant(line, 1.0),
                            np.zeros(line.shape), 1.0, 0.5)
    out = step_implicit(np.zeros(line.shape), 0.5, prob)
    assert np.max(out - cone) <= 1e-4


def test_initial_datum_must_be_feasible(line):
    x = line.axes[0]
    with pytest.raises(ValueError):
        ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape),
                         BoundField.constant(line, 0.2), 1 - np.abs(x),
                         1.0, 0.1)


def test_stationary_data_is_fixed_point(line):
    f = 2.0 * np.ones(line.shape)
    g = BoundField.constant(line, 1.0)
    stat = solve_vi(EllipticProblem(line, 2.0, 1.0, f, g))
    prob = ParabolicProblem(line, 2.0, 1.0, f, g, stat.u, 0.5, 0.1)
    ts = solve_parabolic_vi(prob)
    assert max(np.max(np.abs(s - stat.u)) for s in ts.snapshots) <= 1e-7
    assert np.array_equal(ts.snapshots[0], stat.u)


def test_long_time_converges_to_elliptic_solution(line):
    f = 2.0 * np.ones(line.shape)
    g = BoundField.constant(line, 1.0)
    prob = ParabolicProblem(line, 2.0, 1.0, f, g, np.zeros(line.shape),
                            12.0, 0.1)
    ts = solve_parabolic_vi(prob)
    stat = solve_vi(EllipticProblem(line, 2.0, 1.0, f, g))
    assert field_norm(ts.final() - stat.u, 2, line) <= 1e-6


def test_degenerate_long_time_matches_solve_degenerate(line):
    f = 2.0 * np.ones(line.shape)
    g = BoundField.constant(line, 1.0)
    prob = ParabolicProblem(line, 2.0, 0.0, f, g, np.zeros(line.shape),
                            12.0, 0.1)
    ts = solve_parabolic_vi(prob)
    stat = solve_degenerate(EllipticProblem(line, 2.0, 0.0, f, g))
    assert field_norm(ts.final() - stat.u, 2, line) <= 1e-3


def test_weak_residual_nonnegative(line):
    prob = ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape),
                            BoundField.constant(line, 1.0),
                            np.zeros(line.shape), 1.0, 0.1)
    ts = solve_parabolic_vi(prob, check_weak=3, seed=SEED)
    assert ts.flags["weak_residual_min"] >= -1e-8


def test_energy_inequality(line):
    prob = ParabolicProblem(line, 2.0, 1.0, 2.0 * np.ones(line.shape),
                            BoundField.constant(line, 1.0),
                            np.zeros(line.shape), 2.0, 0.1)
    ts = solve_parabolic_vi(prob)
    assert energy_inequality_slack(ts, prob) <= 1e-8


def test_feasibility_every_snapshot(line):
    prob = ParabolicProblem(line, 2.0, 1.0, 3.0 * np.ones(line.shape),
                            BoundField.constant(line, 0.7),
                            np.zeros(line.shape), 1.0, 0.1)
    ts = solve_parabolic_vi(prob)
    assert max(d["violation_max"] for d in ts.diagnostics) <= 1e-4


def test_step_halving_first_order(line):
    f = 2.0 * np.ones(line.shape)
    g = BoundField.constant(line, 1.0)
    finals = []
    for tau in (0.2, 0.1, 0.05):
        prob = ParabolicProblem(line, 2.0, 1.0, f, g, np.zeros(line.shape),
                                1.0, tau)
        finals.append(solve_parabolic_vi(prob).final())
    e1 = np.max(np.abs(finals[0] - finals[2]))
    e2 = np.max(np.abs(finals[1] - finals[2]))
    assert e2 <= 0.75 * e1  # first-order Rothe: halving tau shrinks the gap


def test_time_dependent_bound(line):
    # shrinking bound forces the solution to flatten over time
    f = 3.0 * np.ones(line.shape)

    def g(t):
        return BoundField.constant(line, 1.0 / (1.0 + t))

    prob = ParabolicProblem(line, 2.0, 1.0, f, g, np.zeros(line.shape), 2.0, 0.25)
    ts = solve_parabolic_vi(prob)
    assert max(d["violation_max"] for d in ts.diagnostics) <= 1e-4
    assert np.max(ts.final()) <= 1.0 / 3.0 + 0.05


# ---------------------------------------------------------------------------
# stability studies
# ---------------------------------------------------------------------------


def test_a_p_constant_value():
    # T = 1, d_2 = 1, p = 2: (1 + 1 + e)/2
    assert a_p_constant(2.0, 1.0, 1.0, 2.0, 2.0) == pytest.approx(
        (2.0 + np.e) / 2.0
    )
    # p < 2 switches on the measure factor
    val = a_p_constant(1.5, 1.0, 0.7, 2.0, 2.0)
    assert val == pytest.approx(
        (2.0 + np.e) / (2 * 0.7) * (2.0 * 2.0 ** (1 / 1.5)) ** 0.5
    )


def base_parabolic(line):
    return ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape),
                            BoundField.constant(line, 1.0),
                            np.zeros(line.shape), 1.0, 0.1)


def test_stability_identical_data_zero_gap(line):
    study = stability_study(base_parabolic(line), "f",
                            [1e-1, 1e-2, 1e-3, 0.0])
    assert study.gaps_sup_l2[-1] == 0.0


def test_stability_f_mode_bound_holds(line):
    study = stability_study(base_parabolic(line), "f", [1e-1, 1e-2, 1e-3])
    assert all(study.bound_consistent)
    assert all(a > b for a, b in zip(study.gaps_sup_l2, study.gaps_sup_l2[1:]))


def test_stability_g_mode_slope(line):
    study = stability_study(base_parabolic(line), "g", [1e-1, 1e-2, 1e-3])
    assert study.slope_sup_l2 >= 0.4
    assert all(study.bound_consistent)
    assert study.B_fit >= 0.0


def test_stability_u0_mode(line):
    study = stability_study(base_parabolic(line), "u0", [1e-1, 1e-2, 1e-3])
    assert all(study.bound_consistent)


def test_stability_needs_three_magnitudes(line):
    with pytest.raises(ValueError):
        stability_study(base_parabolic(line), "f", [1e-1, 1e-2])


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------


def test_transport_reduces_to_parabolic(line):
    f = 2.0 * np.ones(line.shape)
    g = BoundField.constant(line, 1.0)
    tp = TransportProblem(line, 2.0, 1.0, np.zeros(line.shape + (1,)), None,
                          f, g, np.zeros(line.shape), 0.5, 0.1)
    ts_t = solve_transport_vi(tp)
    pp = ParabolicProblem(line, 2.0, 1.0, f, g, np.zeros(line.shape), 0.5, 0.1)
    ts_p = solve_parabolic_vi(pp)
    gap = max(np.max(np.abs(a - b)) for a, b in zip(ts_t.snapshots,
                                                    ts_p.snapshots))
    assert gap <= 1e-5  # transport runs a shallower penalty floor


def test_transport_records_ell(line):
    tp = TransportProblem(line, 2.0, 0.0, 0.3 * np.ones(line.shape + (1,)),
                          0.5 * np.ones(line.shape), np.ones(line.shape),
                          BoundField.constant(line, 1.0),
                          np.zeros(line.shape), 1.0, 0.1)
    assert tp.ell == pytest.approx(0.5)


def test_transport_m_matrix_rejection(line):
    tp = TransportProblem(line, 2.0, 0.0, 0.3 * np.ones(line.shape + (1,)),
                          -30.0 * np.ones(line.shape), np.ones(line.shape),
                          BoundField.constant(line, 1.0),
                          np.zeros(line.shape), 1.0, 0.1)
    with pytest.raises(ValueError, match="M-matrix"):
        solve_transport_vi(tp)


def test_transported_sandpile_monotone(line):
    tp = TransportProblem(line, 2.0, 0.0, 0.3 * np.ones(line.shape + (1,)),
                          None, np.ones(line.shape),
                          BoundField.constant(line, 1.0),
                          np.zeros(line.shape), 1.5, 0.05)
    ts = solve_transport_vi(tp)
    assert ts.monotonicity_violation() <= 1e-7


def test_transport_asymptotics(line):
    tp = TransportProblem(line, 2.0, 0.0, 0.3 * np.ones(line.shape + (1,)),
                          0.5 * np.ones(line.shape), np.ones(line.shape),
                          BoundField.constant(line, 1.0),
                          np.zeros(line.shape), 12.0, 0.1)
    ts = solve_transport_vi(tp)
    w_inf = transport_stationary(tp)
    assert np.max(np.abs(ts.final() - w_inf)) <= 1e-6


def test_transport_stationary_needs_positive_ell(line):
    tp = TransportProblem(line, 2.0, 0.0, 0.3 * np.ones(line.shape + (1,)),
                          None, np.ones(line.shape),
                          BoundField.constant(line, 1.0),
                          np.zeros(line.shape), 1.0, 0.1)
    with pytest.raises(ValueError, match="mu > 0"):
        transport_stationary(tp)


# ---------------------------------------------------------------------------
# quasi-variational evolution
# ---------------------------------------------------------------------------


def test_parabolic_qvi_constant_reduces_to_vi(line):
    f = 2.0 * np.ones(line.shape)
    for mode in ("lagged", "picard"):
        prob = ParabolicProblem(line, 2.0, 1.0, f, None, np.zeros(line.shape),
                                0.5, 0.1, constraint=ConstantBound(1.0))
        ts = solve_parabolic_qvi(prob, mode=mode)
        ref = solve_parabolic_vi(
            ParabolicProblem(line, 2.0, 1.0, f, BoundField.constant(line, 1.0),
                             np.zeros(line.shape), 0.5, 0.1)
        )
        gap = max(np.max(np.abs(a - b)) for a, b in zip(ts.snapshots,
                                                        ref.snapshots))
        assert gap <= 1e-9


def test_parabolic_qvi_picard_self_consistency(line):
    G = NemytskiiBound(lambda x, u: 0.5 + u**2, nu=0.5)
    prob = ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape), None,
                            np.zeros(line.shape), 0.5, 0.1, constraint=G)
    ts = solve_parabolic_qvi(prob, mode="picard", inner_tol=1e-8)
    assert max(d["self_consistency_violation"] for d in ts.diagnostics) <= 1e-6
    assert ts.flags["picard_fallbacks"] == 0


def test_parabolic_qvi_modes_close(line):
    G = NemytskiiBound(lambda x, u: 0.5 + u**2, nu=0.5)
    args = (line, 2.0, 1.0, np.ones(line.shape), None, np.zeros(line.shape),
            0.5, 0.05)
    lagged = solve_parabolic_qvi(ParabolicProblem(*args, constraint=G),
                                 mode="lagged")
    picard = solve_parabolic_qvi(ParabolicProblem(*args, constraint=G),
                                 mode="picard")
    assert np.max(np.abs(lagged.final() - picard.final())) <= 0.05


# ---------------------------------------------------------------------------
# evolutionary certificates and the trajectory contraction
# ---------------------------------------------------------------------------


def thick_fluid_problem(line, ratio=0.5, delta0=0.02, T=1.0, tau=0.1,
                        f_scale=1.0):
    """Scalar analogue of the total-dissipation-bounded constraint with the
    certified ratio pinned by choosing eta0 (p = 2: rho Gamma / eta =
    4 delta0 R_2^2 / eta0)."""
    f = f_scale * np.ones(line.shape)
    n = int(round(T / tau))
    f_l2 = np.sqrt(sum(tau * field_norm(f, 2, line) ** 2 for _ in range(n)))
    front = 1.0 + T + T * T * np.exp(T)
    r2sq = front / 2.0 * f_l2**2  # delta = 1, u0 = 0
    eta0 = 4.0 * delta0 * r2sq / ratio
    gamma = gradient_energy_trajectory(eta0, delta0)
    constraint = TrajectorySeparated(gamma, BoundField.constant(line, 1.0))
    problem = ParabolicProblem(line, 2.0, 1.0, f,
                               BoundField.constant(line, eta0),
                               np.zeros(line.shape), T, tau)
    return problem, constraint, eta0


def test_strong_certificate_formulas(line):
    problem, constraint, eta0 = thick_fluid_problem(line, ratio=0.5)
    cert = evolution_certificate(problem, constraint, which="strong-Rp")
    T, tau = problem.T, problem.tau
    f_l2 = np.sqrt(sum(tau * field_norm(problem.f, 2, line) ** 2
                       for _ in range(int(round(T / tau)))))
    front = 1.0 + T + T * T * np.exp(T)
    r2 = np.sqrt(front / 2.0 * f_l2**2)
    assert cert.R == pytest.approx(r2, rel=1e-12)
    assert cert.rho == pytest.approx(2.0 * r2, rel=1e-12)  # p=2 drops the tail
    assert cert.left == pytest.approx(2.0 * r2 * 2.0 * 0.02 * r2, rel=1e-12)
    assert cert.ratio == pytest.approx(0.5, rel=1e-10)
    assert cert.verdict


def test_strong_certificate_thick_fluid_reduction(line):
    """For p = 2 the condition rho*Gamma < eta is exactly
    2(1+T+T^2 e^T)(||f||^2+||u0||^2) delta0 < eta0 delta, the quantified
    form of the example's smallness condition."""
    problem, constraint, eta0 = thick_fluid_problem(line, ratio=0.5,
                                                    delta0=0.02)
    cert = evolution_certificate(problem, constraint, which="strong-Rp")
    front = 1.0 + problem.T + problem.T**2 * np.exp(problem.T)
    lhs = 2.0 * front * cert.f_l2qt**2 * 0.02
    assert cert.left / cert.right == pytest.approx(lhs / eta0, rel=1e-12)


def test_strong_certificate_flips_when_eta_halved(line):
    problem, constraint, eta0 = thick_fluid_problem(line, ratio=0.9)
    gamma_weak = gradient_energy_trajectory(eta0 * 0.4, 0.02)
    weak = TrajectorySeparated(gamma_weak, constraint.phi)
    cert = evolution_certificate(problem, weak, which="strong-Rp")
    assert not cert.verdict


def test_weak_certificate_formulas(line):
    T, tau = 1.0, 0.1
    f = np.ones(line.shape)
    eta0, delta0 = 30.0, 0.1
    gamma = l2_energy_trajectory(eta0, delta0)
    constraint = TrajectorySeparated(gamma, BoundField.constant(line, 1.0))
    problem = ParabolicProblem(line, 2.0, 0.5, f, BoundField.constant(line, eta0),
                               np.zeros(line.shape), T, tau)
    cert = evolution_certificate(problem, constraint, which="weak-R*")
    f_l2 = np.sqrt(sum(tau * field_norm(f, 2, line) ** 2
                       for _ in range(int(round(T / tau)))))
    r_star = np.sqrt(T + T * T * np.exp(T)) * f_l2
    assert cert.R == pytest.approx(r_star, rel=1e-12)
    assert cert.left == pytest.approx(2.0 * r_star * 2.0 * delta0 * r_star,
                                      rel=1e-12)
    assert cert.right == eta0


def test_certificate_norm_mismatch_rejected(line):
    problem, constraint, _ = thick_fluid_problem(line)
    with pytest.raises(ValueError):
        evolution_certificate(problem, constraint, which="weak-R*")


def test_certificate_gamma_constant_holds(line):
    gamma = gradient_energy_trajectory(5.0, 0.0)
    constraint = TrajectorySeparated(gamma, BoundField.constant(line, 1.0))
    problem = ParabolicProblem(line, 2.0, 1.0, 100 * np.ones(line.shape),
                               BoundField.constant(line, 5.0),
                               np.zeros(line.shape), 1.0, 0.1)
    cert = evolution_certificate(problem, constraint, which="strong-Rp")
    assert cert.left == 0.0 and cert.verdict


def test_trajectory_contraction_certified(line):
    problem, constraint, _ = thick_fluid_problem(line, ratio=0.5)
    ts, trace = solve_parabolic_qvi_contraction(problem, constraint,
                                                tol=1e-9)
    assert trace["converged"]
    assert trace["observed_q_max"] <= trace["certified_ratio"] + 0.05
    assert trace["self_consistency_violation"] <= 1e-6
    assert not trace["q_exceeds_certificate"]


def test_trajectory_contraction_gamma_constant_one_outer(line):
    gamma = gradient_energy_trajectory(2.0, 0.0)
    constraint = TrajectorySeparated(gamma, BoundField.constant(line, 1.0))
    problem = ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape),
                               BoundField.constant(line, 2.0),
                               np.zeros(line.shape), 0.5, 0.1)
    ts, trace = solve_parabolic_qvi_contraction(problem, constraint, tol=1e-9)
    assert len(trace["diffs"]) == 2 and trace["diffs"][1] <= 1e-12


def test_trajectory_contraction_inconsistency(line):
    from gradvi.evolution import EvolutionCertificate

    gamma = gradient_energy_trajectory(0.02, 100.0)  # violently expanding
    constraint = TrajectorySeparated(gamma, BoundField.constant(line, 1.0))
    problem = ParabolicProblem(line, 2.0, 1.0, np.ones(line.shape),
                               BoundField.constant(line, 0.02),
                               np.zeros(line.shape), 0.5, 0.1)
    fake = EvolutionCertificate(
        which="strong-Rp", p=2.0, delta=1.0, T=0.5, f_l2qt=1.0, u0_l2=0.0,
        R=1.0, rho=2.0, phi_sup=1.0, eta_at_R=1.0, M_at_R=1.0,
        gamma_lip_at_R=0.1, left=0.2, right=1.0, verdict=True,
    )
    with pytest.raises(CertificateInconsistencyError):
        solve_parabolic_qvi_contraction(problem, constraint, certificate=fake,
                                        max_outer=10)
