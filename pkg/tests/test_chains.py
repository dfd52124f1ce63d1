import math

import numpy as np
import pytest

from reinforced_ldp.chains import (
    TimeGrid,
    grid_functions,
    interpolate_path,
    occupation_measures,
    path_rng,
    reference_policy,
    reverse_path,
    simulate_chain,
    simulate_chain_batch,
    simulate_controlled,
    verify_chain_rule_identity,
    export_path_csv,
)
from reinforced_ldp.errors import DimensionMismatch, PolicyError, PreconditionViolation
from reinforced_ldp.measures import Kernel

BENCH = Kernel([[0.9, 0.1], [0.2, 0.8]])
EULER_GAMMA = 0.5772156649015329
N_STEPS = 200
SEED = 42


def test_grid_spacing_and_lookup():
    g = TimeGrid(10)
    assert g.times[0] == 0.0
    assert np.allclose(np.diff(g.times), 1.0 / np.arange(2, 12))
    # t_1 = 1/2 <= 0.6 < t_2 = 1/2 + 1/3
    assert grid_functions(0.6, 10) == (1, 0.5, 3)
    assert g.index_of(0.0) == 0
    assert g.index_of(g.horizon + 5.0) == 10


def test_grid_horizon_tracks_log_n():
    """t_n - log(n+1) is sandwiched by the harmonic-sum bracket."""
    for n in (10, 100, 10_000):
        g = TimeGrid(n)
        centered = g.horizon - math.log(n + 1) - (EULER_GAMMA - 1.0)
        assert 1.0 / (2 * (n + 2)) < centered < 1.0 / (2 * n)


def test_grid_index_vectorized_matches_scalar():
    g = TimeGrid(50)
    ts = np.linspace(0.0, g.horizon, 23)
    vec = g.index_of(ts)
    assert vec.tolist() == [g.index_of(float(t)) for t in ts]


def test_grid_rejects_negative_time():
    with pytest.raises(PreconditionViolation):
        TimeGrid(5).index_of(-0.1)


def test_simulate_chain_reproducible():
    a = simulate_chain(BENCH, 1, N_STEPS, SEED)
    b = simulate_chain(BENCH, 1, N_STEPS, SEED)
    c = simulate_chain(BENCH, 1, N_STEPS, SEED + 1)
    assert np.array_equal(a.states, b.states)
    assert (a.states != c.states).any()


def test_simulate_chain_counts_accumulate():
    path = simulate_chain(BENCH, 2, N_STEPS, SEED)
    assert path.states[0] == 2
    onehot = np.zeros((N_STEPS, 2), dtype=np.int64)
    onehot[np.arange(N_STEPS), path.states - 1] = 1
    assert np.array_equal(path.counts, np.cumsum(onehot, axis=0))
    ks = np.arange(1, N_STEPS + 1)[:, None]
    assert np.allclose(path.L, path.counts / ks)
    assert path.final().weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_simulate_chain_batch_stream_zero_matches_single():
    single = simulate_chain(BENCH, 1, 60, SEED)
    batch = simulate_chain_batch(BENCH, 1, 60, 4, SEED)
    assert np.array_equal(batch[0], single.counts[-1])
    assert np.all(batch.sum(axis=1) == 60)


def test_x0_validation():
    with pytest.raises(DimensionMismatch):
        simulate_chain(BENCH, 3, 10, SEED)
    with pytest.raises(DimensionMismatch):
        simulate_chain(BENCH, 0, 10, SEED)


def test_controlled_reference_policy_has_zero_cost():
    """Feeding Lbar A back as the control makes both occupation measures equal."""
    path = simulate_controlled(BENCH, 1, reference_policy(BENCH), N_STEPS, SEED)
    rho = path.Lbar[:-1] @ BENCH.matrix
    # policy rows are renormalized on ingestion, so equality is up to one ulp
    assert np.allclose(path.mu, rho, atol=1e-15, rtol=0.0)
    lhs, rhs = verify_chain_rule_identity(path, BENCH)
    assert abs(lhs) <= 1e-12 and abs(rhs) <= 1e-12


def test_controlled_update_form():
    path = simulate_controlled(BENCH, 1, reference_policy(BENCH), 50, SEED)
    assert np.array_equal(path.Lbar[0], [1.0, 0.0])
    for k in range(50):
        e = np.zeros(2)
        e[path.states[k] - 1] = 1.0
        expect = path.Lbar[k] + (e - path.Lbar[k]) / (k + 2)
        assert np.array_equal(path.Lbar[k + 1], expect)


def test_chain_rule_identity_random_policies():
    rng = np.random.default_rng(7)
    for trial in range(5):
        mix = rng.uniform(0.2, 0.8)
        target = rng.dirichlet(np.ones(2))

        def policy(k, Lbar, mix=mix, target=target):
            return mix * (Lbar @ BENCH.matrix) + (1 - mix) * target

        path = simulate_controlled(BENCH, 1, policy, 100, SEED + trial)
        lhs, rhs = verify_chain_rule_identity(path, BENCH)
        assert abs(lhs - rhs) <= 1e-8
        assert lhs >= 0.0


def test_policy_outside_kernel_support_raises():
    bad = Kernel([[0.9, 0.1], [0.2, 0.8]])

    def policy(k, Lbar):
        return np.array([1.0, 0.0])

    path = simulate_controlled(bad, 2, policy, 30, SEED)
    # control mass on state 1 is fine here; cost stays finite
    lhs, rhs = verify_chain_rule_identity(path, bad)
    assert math.isfinite(lhs) and math.isfinite(rhs)


def test_occupation_measures_marginals():
    path = simulate_controlled(BENCH, 1, reference_policy(BENCH), 80, SEED)
    occ = occupation_measures(path, BENCH)
    bm, tm = occ.total_mass()
    assert bm == pytest.approx(1.0, abs=1e-12)
    assert tm == pytest.approx(1.0, abs=1e-12)
    time_beta, time_theta = occ.time_marginals()
    assert np.allclose(time_beta, 1.0 / 80)
    assert np.allclose(time_theta, 1.0 / 80)
    assert occ.edges[0] == 0.0
    assert occ.edges[-1] == pytest.approx(path.grid().horizon)


def test_interpolant_hits_nodes_and_is_two_lipschitz():
    path = simulate_controlled(BENCH, 1, reference_policy(BENCH), 60, SEED)
    interp = interpolate_path(path)
    g = path.grid()
    assert np.allclose(interp(g.times[:-1]), path.Lbar[:-1], atol=1e-14)
    rng = np.random.default_rng(3)
    ts = rng.uniform(0.0, g.horizon, size=40)
    ss = rng.uniform(0.0, g.horizon, size=40)
    vt, vs = interp(ts), interp(ss)
    l1 = np.abs(vt - vs).sum(axis=1)
    assert np.all(l1 <= 2.0 * np.abs(ts - ss) + 1e-12)


def test_reversed_interpolant_freezes_past_horizon():
    path = simulate_controlled(BENCH, 1, reference_policy(BENCH), 30, SEED)
    rev = reverse_path(path)
    assert np.allclose(rev(0.0), path.Lbar[-1], atol=1e-14)
    assert np.allclose(rev(rev.horizon + 3.0), path.Lbar[0], atol=1e-14)


def test_path_rng_streams_are_distinct():
    u0 = path_rng(9, 0).random(8)
    u1 = path_rng(9, 1).random(8)
    again = path_rng(9, 0).random(8)
    assert np.array_equal(u0, again)
    assert (u0 != u1).any()


def test_export_path_csv_shape(tmp_path):
    path = simulate_chain(BENCH, 1, 5, SEED)
    out = tmp_path / "path.csv"
    export_path_csv(path, out, "config_sha256=deadbeef seed=42")
    lines = out.read_text().splitlines()
    assert lines[0] == "# config_sha256=deadbeef seed=42"
    assert lines[1] == "step,state,L_1,L_2"
    assert len(lines) == 2 + 5
    first = lines[2].split(",")
    assert first[0] == "1" and first[1] == "1"
