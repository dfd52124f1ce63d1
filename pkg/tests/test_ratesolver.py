import math

import numpy as np
import pytest

from reinforced_ldp.errors import (
    ConvergenceError,
    DimensionMismatch,
    InfeasibleTrajectory,
    PreconditionViolation,
)
from reinforced_ldp.measures import (
    Kernel,
    ProbVec,
    relative_entropy,
    stationary_distribution,
)
from reinforced_ldp.ratesolver import (
    PiecewiseControl,
    cost_gradient,
    discounted_cost,
    integrate_forward,
    project_control,
    rate_profile,
    simplex_mesh,
    simplex_project_rows,
    solve_dv_rate,
    solve_rate,
)

BENCH = Kernel([[0.9, 0.1], [0.2, 0.8]])
RANK1_P = np.array([0.7, 0.3])
RANK1 = Kernel(np.tile(RANK1_P, (2, 1)))
D3 = Kernel([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.2, 0.3, 0.5]])


def _tile_control(m, T, J):
    return PiecewiseControl(T=T, J=J, eta=np.tile(np.asarray(m, float), (J, 1)))


def test_equilibrium_trajectory_is_bit_exact():
    """eta == m keeps every node at m, with no float drift over 280 steps."""
    m = np.array([0.3, 0.7])
    grid = integrate_forward(m, _tile_control(m, 14.0, 280))
    assert np.array_equal(grid.M, np.tile(m, (281, 1)))
    assert grid.all_feasible


def test_trajectory_rows_sum_to_one():
    rng = np.random.default_rng(0)
    m = np.array([0.25, 0.35, 0.4])
    raw = rng.dirichlet(np.ones(3), size=160)
    eta = project_control(m, raw, 8.0)
    grid = integrate_forward(m, PiecewiseControl(T=8.0, J=160, eta=eta))
    assert np.abs(grid.M.sum(axis=1) - 1.0).max() <= 1e-12


def test_discounted_cost_at_equilibrium_is_plain_entropy():
    # stationary trajectory: cost is (1 - e^{-T}) R(m || m A)
    m = np.array([0.3, 0.7])
    got = discounted_cost(m, _tile_control(m, 14.0, 280), BENCH)
    expect = -math.expm1(-14.0) * relative_entropy(m, m @ BENCH.matrix)
    assert got == pytest.approx(expect, rel=1e-12)


def test_discounted_cost_rejects_infeasible():
    eta = np.tile(np.array([0.0, 1.0]), (40, 1))
    ctrl = PiecewiseControl(T=2.0, J=40, eta=eta)
    with pytest.raises(InfeasibleTrajectory):
        discounted_cost(np.array([0.9, 0.1]), ctrl, BENCH)


def test_solve_rate_sanov_reduction():
    """Rank-one kernels collapse the rate to R(m || p)."""
    for m1 in (0.2, 0.5, 0.9):
        m = np.array([m1, 1.0 - m1])
        br = solve_rate(m, RANK1, T=14.0, J=280)
        assert abs(br.lower - relative_entropy(m, RANK1_P)) <= 1e-3


def test_solve_rate_zero_at_stationary():
    mstar = stationary_distribution(BENCH)
    br = solve_rate(mstar, BENCH, T=14.0, J=280)
    assert 0.0 <= br.lower <= 1e-6
    assert br.diagnostics.converged


def test_bracket_width_identity():
    br = solve_rate(np.array([0.3, 0.7]), BENCH, T=6.0, J=120)
    assert br.upper - br.lower == pytest.approx(
        math.exp(-6.0) * math.log(1.0 / BENCH.delta0), rel=1e-12
    )
    assert br.lower >= 0.0


def test_solve_rate_monotone_in_horizon_when_converged():
    """With the mesh width fixed, longer horizons only add nonnegative cost.

    Checked on the product kernel, where the solves converge; stalled
    solves report an upper approximation that need not be monotone.
    """
    m = np.array([0.3, 0.7])
    vals = [solve_rate(m, RANK1, T=T, J=int(T / 0.05)).lower for T in (2.0, 6.0, 10.0)]
    assert vals[0] <= vals[1] + 1e-12
    assert vals[1] <= vals[2] + 1e-12


def test_solve_rate_flags_stall_and_binding():
    br = solve_rate(np.array([0.3, 0.7]), BENCH, T=2.0, J=40)
    assert br.diagnostics.stalled
    assert br.diagnostics.binding
    assert not br.diagnostics.converged


def test_boundary_query_is_lifted():
    br = solve_rate(np.array([0.0, 1.0]), BENCH, T=4.0, J=80)
    assert br.diagnostics.boundary_lifted
    assert np.isfinite(br.lower)


def test_solve_rate_dimension_check():
    with pytest.raises(DimensionMismatch):
        solve_rate(np.array([0.2, 0.3, 0.5]), BENCH, T=2.0, J=40)


def test_project_control_feasible_and_idempotent():
    rng = np.random.default_rng(1)
    m = np.array([0.3, 0.7])
    raw = rng.normal(0.0, 1.0, size=(60, 2))
    eta = project_control(m, raw, 3.0)
    assert eta.min() >= 0.0
    assert np.abs(eta.sum(axis=1) - 1.0).max() <= 1e-12
    grid = integrate_forward(m, PiecewiseControl(T=3.0, J=60, eta=eta))
    assert grid.M.min() >= -1e-9
    again = project_control(m, eta.copy(), 3.0)
    assert np.abs(again - eta).max() <= 1e-12


def test_simplex_projection_is_closest_point():
    rng = np.random.default_rng(2)
    v = rng.normal(0.0, 2.0, size=(50, 4))
    proj = simplex_project_rows(v)
    others = rng.dirichlet(np.ones(4), size=50)
    d_proj = ((proj - v) ** 2).sum(axis=1)
    d_other = ((others - v) ** 2).sum(axis=1)
    assert np.all(d_proj <= d_other + 1e-12)


def test_adjoint_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    m = np.array([0.4, 0.6])
    T, J = 1.5, 30
    base = np.tile(m, (J, 1))
    eta = 0.8 * base + 0.2 * rng.dirichlet(np.ones(2), size=J)
    ctrl = PiecewiseControl(T=T, J=J, eta=eta)
    g = cost_gradient(m, ctrl, BENCH)
    h = 1e-6
    for idx in [(0, 0), (7, 1), (J - 1, 0)]:
        bump = np.zeros_like(eta)
        bump[idx] = h
        up = discounted_cost(m, PiecewiseControl(T=T, J=J, eta=eta + bump), BENCH)
        dn = discounted_cost(m, PiecewiseControl(T=T, J=J, eta=eta - bump), BENCH)
        fd = (up - dn) / (2 * h)
        assert abs(g[idx] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_cost_is_jointly_convex_along_segments():
    rng = np.random.default_rng(4)
    m = np.array([0.3, 0.7])
    T, J = 2.0, 40
    a = project_control(m, np.tile(m, (J, 1)) + rng.normal(0, 0.1, (J, 2)), T)
    b = project_control(m, np.tile(m, (J, 1)) + rng.normal(0, 0.1, (J, 2)), T)
    ca = discounted_cost(m, PiecewiseControl(T=T, J=J, eta=a), BENCH)
    cb = discounted_cost(m, PiecewiseControl(T=T, J=J, eta=b), BENCH)
    mid = discounted_cost(m, PiecewiseControl(T=T, J=J, eta=0.5 * (a + b)), BENCH)
    assert mid <= 0.5 * ca + 0.5 * cb + 1e-10


def test_dv_rate_closed_forms():
    # point mass: the pair measure is pinned to the diagonal atom
    assert solve_dv_rate(ProbVec.point_mass(1, 2), BENCH) == pytest.approx(
        -math.log(BENCH.matrix[0, 0]), abs=1e-8
    )
    assert solve_dv_rate(stationary_distribution(BENCH), BENCH) <= 1e-8
    theta = np.array([0.35, 0.65])
    assert solve_dv_rate(theta, RANK1) == pytest.approx(
        relative_entropy(theta, RANK1_P), abs=1e-6
    )


def test_dv_rate_positive_away_from_stationary():
    mstar = stationary_distribution(BENCH).weights
    theta = mstar + np.array([0.05, -0.05])
    assert solve_dv_rate(theta, BENCH) >= 1e-5


def test_dv_rate_dimension_check():
    with pytest.raises(DimensionMismatch):
        solve_dv_rate(np.array([0.2, 0.3, 0.5]), BENCH)


def test_rate_profile_ordering_and_minimum_near_stationary():
    mesh = simplex_mesh(2, 0.25)
    rows = rate_profile(BENCH, mesh, T=14.0, J=280, dv=True, threads=1)
    assert [tuple(r.m) for r in rows] == [tuple(p) for p in mesh]
    lowers = np.array([r.lower for r in rows])
    # m_* = (2/3, 1/3): the mesh minimizer sits one lattice point away
    best = rows[int(np.argmin(lowers))]
    assert abs(best.m[0] - 2.0 / 3.0) <= 0.25
    flags = [r.boundary_lifted for r in rows]
    assert flags[0] and flags[-1] and not any(flags[1:-1])


def test_rate_profile_rank_one_matches_dv():
    mesh = simplex_mesh(2, 0.25)
    rows = rate_profile(RANK1, mesh, T=14.0, J=280, dv=True, threads=1)
    worst = max(abs(r.lower - r.dv_rate) for r in rows if not r.boundary_lifted)
    assert worst <= 2e-3


def test_rate_profile_generic_kernel_differs_from_dv():
    """Recorded observation: the two rates separate on the test kernel."""
    rows = rate_profile(BENCH, [np.array([0.25, 0.75])], T=14.0, J=280, dv=True)
    assert abs(rows[0].lower - rows[0].dv_rate) > 5e-3


def test_simplex_mesh_counts_and_validation():
    assert len(simplex_mesh(2, 0.25)) == 5
    assert len(simplex_mesh(3, 0.5)) == 6
    for p in simplex_mesh(3, 0.5):
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(PreconditionViolation):
        simplex_mesh(2, 0.3)


def test_d3_solves_run_and_bracket_holds():
    m = np.array([0.2, 0.3, 0.5])
    br = solve_rate(m, D3, T=8.0, J=160)
    assert br.lower >= 0.0
    assert br.upper == pytest.approx(br.lower + math.exp(-8.0) * math.log(1 / D3.delta0))
    mstar = stationary_distribution(D3)
    assert solve_rate(mstar, D3, T=8.0, J=160).lower <= 1e-6
