import numpy as np
import pytest

from gradvi import (
    BoundField,
    CertificateInconsistencyError,
    ConstantBound,
    Grid,
    NemytskiiBound,
    QVIProblem,
    SeparatedNonlocal,
    constants_report,
    contraction_certificate,
    field_norm,
    gradient_energy_functional,
    solve_qvi_contraction,
    solve_qvi_picard,
    solve_vi_oracle,
    violation,
)
from gradvi.elliptic import EllipticProblem
from gradvi.qvi import CertificateReport

from conftest import SEED


@pytest.fixture(scope="module")
def line_consts():
    grid = Grid.interval(-1.0, 1.0, 101)
    return grid, constants_report(grid, 2.0)


def energy_problem(grid, consts, f_scale=1.0, ratio=0.5, delta0=0.05):
    """Built-in energy gamma scaled so the certified ratio is `ratio` at
    f_scale = 1 (ratio = 4 delta0 (c2 ||f||)^2 / eta0 for p = 2)."""
    f = f_scale * np.ones(grid.shape)
    f_norm = field_norm(np.ones(grid.shape), 2.0, grid)
    eta0 = 4.0 * delta0 * (consts.c_p * f_norm) ** 2 / ratio
    gamma = gradient_energy_functional(eta0, delta0)
    G = SeparatedNonlocal(gamma, BoundField.constant(grid, 1.0))
    return QVIProblem(grid, 2.0, 1.0, f, G, constants=consts)


def test_picard_constant_bound_converges_in_one_step(line):
    prob = QVIProblem(line, 2.0, 1.0, np.ones(line.shape), ConstantBound(0.5))
    sol, trace = solve_qvi_picard(prob)
    assert trace.converged
    assert len(trace.diffs) == 2 and trace.diffs[1] == 0.0
    assert trace.self_consistency == 0.0


def test_picard_zero_forcing(line):
    prob = QVIProblem(line, 2.0, 1.0, np.zeros(line.shape), ConstantBound(1.0))
    sol, trace = solve_qvi_picard(prob)
    assert np.max(np.abs(sol.u)) <= 1e-12
    assert trace.converged


def test_picard_rejects_sandpile_g0(line):
    from gradvi import SandpileG0

    with pytest.raises(ValueError):
        QVIProblem(line, 2.0, 1.0, np.ones(line.shape),
                   SandpileG0(1.0, np.zeros(line.shape)))


def test_picard_separated_matches_scalar_bisection_oracle(line_consts):
    """Fixed point of u -> S(f, gamma(u) phi) against outer bisection on the
    scalar s = gamma(u) with the ADMM oracle as the inner solver."""
    grid, consts = line_consts
    prob = energy_problem(grid, consts, ratio=0.6, delta0=0.2)
    gamma = prob.G.gamma
    phi = prob.G.phi

    def fixed_gap(s):
        g = BoundField(s * phi.values, nu=s * phi.nu)
        sub = EllipticProblem(grid, 2.0, 1.0, prob.f, g)
        u = solve_vi_oracle(sub, tol=1e-12).u
        return gamma.value(u, grid) - s

    lo, hi = gamma.eta(0.0), gamma.bound_m(10.0) + 10.0
    assert fixed_gap(lo) > 0 > fixed_gap(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if fixed_gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    s_star = 0.5 * (lo + hi)
    g_star = BoundField(s_star * phi.values, nu=s_star * phi.nu)
    u_star = solve_vi_oracle(
        EllipticProblem(grid, 2.0, 1.0, prob.f, g_star), tol=1e-12
    ).u
    sol, trace = solve_qvi_picard(prob, tol=1e-11)
    assert trace.converged
    assert np.max(np.abs(sol.u - u_star)) <= 1e-6


def test_picard_nemytskii_self_consistency(line):
    G = NemytskiiBound(lambda x, u: 0.4 + u**2, nu=0.4)
    prob = QVIProblem(line, 2.0, 1.0, 0.8 * np.ones(line.shape), G)
    sol, trace = solve_qvi_picard(prob, tol=1e-10)
    assert trace.converged
    assert trace.self_consistency <= 2e-10 + 2 * 1e-10
    assert sol.diagnostics["violation_vs_G"] <= 1e-4


def test_picard_nemytskii_inactive_equals_unconstrained(line):
    """With small forcing the bound never binds and the fixed point is the
    unconstrained solution (independent tridiagonal solve)."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    G = NemytskiiBound(lambda x, u: 1.0 + u**2, nu=1.0)
    f = 0.1 * np.ones(line.shape)
    prob = QVIProblem(line, 2.0, 1.0, f, G)
    sol, trace = solve_qvi_picard(prob, tol=1e-10)
    n = line.n_interior
    h = line.h[0]
    lap = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n)) / h**2
    u_ref = line.embed(spla.spsolve(lap.tocsc(), line.restrict(f)))
    assert violation(u_ref, G(u_ref, line), line)[0] == 0.0  # truly inactive
    assert np.max(np.abs(sol.u - u_ref)) <= 1e-7


def test_certificate_arithmetic_p2(line_consts):
    grid, consts = line_consts
    prob = energy_problem(grid, consts, ratio=0.5, delta0=0.05)
    cert = contraction_certificate(prob)
    # C_2 = c_2 and left = Gamma(R_f) * 2 * c_2 * ||f||_2 by hand
    f_norm = field_norm(prob.f, 2.0, grid)
    r_f = consts.c_p * f_norm
    gamma = prob.G.gamma
    assert cert.R_f == pytest.approx(r_f, rel=1e-12)
    assert cert.C_p == pytest.approx(consts.c_p, rel=1e-12)
    assert cert.left == pytest.approx(
        gamma.lip_gamma(r_f) * 2.0 * consts.c_p * f_norm, rel=1e-12
    )
    assert cert.right == pytest.approx(gamma.eta(r_f), rel=1e-12)
    assert cert.ratio == pytest.approx(0.5, rel=1e-10)
    assert cert.verdict


def test_certificate_gamma_constant_always_holds(line_consts):
    grid, consts = line_consts
    gamma = gradient_energy_functional(eta0=3.0, delta0=0.0)  # Gamma == 0
    G = SeparatedNonlocal(gamma, BoundField.constant(grid, 1.0))
    prob = QVIProblem(grid, 2.0, 1.0, 50.0 * np.ones(grid.shape), G,
                      constants=consts)
    cert = contraction_certificate(prob)
    assert cert.left == 0.0
    assert cert.verdict


def test_certificate_flips_without_error_on_big_f(line_consts):
    grid, consts = line_consts
    base = energy_problem(grid, consts, ratio=0.5)
    big = QVIProblem(grid, 2.0, 1.0, 10.0 * base.f, base.G, constants=consts)
    cert = contraction_certificate(big)
    assert not cert.verdict
    assert cert.ratio == pytest.approx(50.0, rel=1e-8)


def test_certificate_range_checks(line_consts):
    grid, consts = line_consts
    prob = energy_problem(grid, consts)
    bad_p = QVIProblem(grid, 3.0, 1.0, prob.f, prob.G, constants=consts)
    with pytest.raises(ValueError):
        contraction_certificate(bad_p)
    plain = QVIProblem(grid, 2.0, 1.0, prob.f, ConstantBound(1.0),
                       constants=consts)
    with pytest.raises(ValueError):
        contraction_certificate(plain)


def test_certificate_p_below_2(line_consts):
    grid, _ = line_consts
    consts15 = constants_report(grid, 1.5, samples=50_000)
    gamma = gradient_energy_functional(eta0=50.0, delta0=0.01)
    G = SeparatedNonlocal(gamma, BoundField.constant(grid, 1.0))
    prob = QVIProblem(grid, 1.5, 1.0, 0.5 * np.ones(grid.shape), G,
                      constants=consts15)
    cert = contraction_certificate(prob)
    # C_p = (2 M(R_f) phi_sup)^(2-p) c_p omega_p^2 / d_p for p < 2
    m_r = gamma.bound_m(cert.R_f)
    expect = (2 * m_r) ** 0.5 * consts15.c_p * consts15.omega_p**2 / consts15.d_p
    assert cert.C_p == pytest.approx(expect, rel=1e-12)
    assert "sampled" in cert.notes


def test_contraction_run_certified(line_consts):
    grid, consts = line_consts
    prob = energy_problem(grid, consts, ratio=0.5)
    sol, trace, cert = solve_qvi_contraction(prob, tol=1e-10)
    assert cert.verdict
    assert sol.diagnostics["observed_q_max"] <= cert.ratio + 0.05
    assert trace.self_consistency <= 1e-6
    assert not sol.flags["q_exceeds_certificate"]
    # a priori radius: every iterate stays inside R_f + tolerance
    assert all(nrm <= cert.R_f + 1e-8 for nrm in trace.iterate_norms)


def test_contraction_geometric_decay(line_consts):
    grid, consts = line_consts
    prob = energy_problem(grid, consts, ratio=0.5)
    _, trace, cert = solve_qvi_contraction(prob, tol=1e-10)
    noise = 100 * 1e-10
    for q, d in zip(trace.q_factors, trace.diffs[:-1]):
        if d > noise:
            assert q <= cert.ratio + 0.05


def test_contraction_requires_verdict_or_override(line_consts):
    grid, consts = line_consts
    base = energy_problem(grid, consts, ratio=0.5)
    big = QVIProblem(grid, 2.0, 1.0, 10.0 * base.f, base.G, constants=consts)
    with pytest.raises(ValueError):
        solve_qvi_contraction(big)
    sol, trace, cert = solve_qvi_contraction(big, override=True, max_iter=40)
    assert not cert.verdict  # ran anyway, no hard error


def test_contraction_inconsistency_raises(line_consts):
    """A forged holding certificate on an expanding map must trip the hard
    inconsistency error (q > 1 under verdict = True)."""
    grid, consts = line_consts
    gamma = gradient_energy_functional(eta0=0.05, delta0=50.0)  # expanding
    G = SeparatedNonlocal(gamma, BoundField.constant(grid, 1.0))
    prob = QVIProblem(grid, 2.0, 1.0, np.ones(grid.shape), G, constants=consts)
    fake = CertificateReport(
        p=2.0, delta=1.0, f_norm_dual=1.0, R_f=1.0, C_p=1.0, phi_sup=1.0,
        M_at_R=1.0, eta_at_R=1.0, gamma_lip_at_R=0.1, left=0.1, right=1.0,
        verdict=True, constants=consts,
    )
    with pytest.raises(CertificateInconsistencyError):
        solve_qvi_contraction(prob, certificate=fake, max_iter=12)


def test_determinism_of_traces(line_consts):
    grid, consts = line_consts
    prob = energy_problem(grid, consts, ratio=0.5)
    _, t1, _ = solve_qvi_contraction(prob, tol=1e-10)
    _, t2, _ = solve_qvi_contraction(prob, tol=1e-10)
    assert t1.diffs == t2.diffs
    assert t1.q_factors == t2.q_factors
