import numpy as np
import pytest

from mfclab.errors import ConfigurationError, DivergenceError
from mfclab.model import DiracLaw, EmpiricalMeasure, Partition
from mfclab.problems import make_lq1d
from mfclab.sim import (
    BrownianStore,
    ControlPath,
    cost_discrete,
    cost_fine,
    em_step,
    embed_control_to_partition,
    h2_distance,
    per_sample_cost,
    project_control_to_partition,
    simulate_discrete,
    simulate_fine,
    wasserstein2_1d,
)
from conftest import zero_cost_model


def store_for(part, m=64, seed=0, base=None):
    return BrownianStore(seed, m, 1, part.horizon, base or part.n_steps)


# ---------------------------------------------------------------------------
# Brownian store


def test_store_reproducible_and_keyed():
    s1 = BrownianStore(9, 16, 2, 1.0, 8)
    s2 = BrownianStore(9, 16, 2, 1.0, 8)
    assert np.array_equal(s1.base_increment(3), s2.base_increment(3))
    assert not np.array_equal(s1.base_increment(3), s1.base_increment(4))
    s3 = BrownianStore(10, 16, 2, 1.0, 8)
    assert not np.array_equal(s1.base_increment(3), s3.base_increment(3))


def test_store_refinement_consistency_exact():
    store = BrownianStore(4, 32, 1, 1.0, 16)
    fine = store.increments(Partition.uniform(16, 1.0))
    for n in (8, 4, 2, 1):
        coarse = store.increments(Partition.uniform(n, 1.0))
        ratio = 16 // n
        recomputed = fine.reshape(n, ratio, 32, 1).sum(axis=1)
        assert np.array_equal(coarse, recomputed)


def test_store_rejects_unaligned_partition():
    store = BrownianStore(0, 4, 1, 1.0, 8)
    with pytest.raises(ConfigurationError):
        store.increments(Partition(np.array([0.0, 0.3, 1.0])))


def test_store_nonuniform_aligned_partition():
    store = BrownianStore(0, 4, 1, 1.0, 8)
    part = Partition(np.array([0.0, 0.125, 0.5, 1.0]))
    inc = store.increments(part)
    fine = store.increments(Partition.uniform(8, 1.0))
    assert np.array_equal(inc[1], fine[1:4].sum(axis=0))


# ---------------------------------------------------------------------------
# stepping


def test_em_step_pure_drift(zero_spec):
    spec = make_lq1d(b0=1.0, b2=0.0, sigma0=0.0, qx=0.0, gx=0.0)
    out = em_step(spec, 0.0, 0.5, np.zeros((3, 1)), np.zeros((3, 1)), np.ones((3, 1)))
    assert np.allclose(out, 0.5)


def test_em_step_pure_diffusion():
    spec = make_lq1d(b2=0.0, qx=0.0, gx=0.0)
    out = em_step(spec, 0.0, 0.1, np.zeros((1, 1)), np.zeros((1, 1)), np.array([[0.3]]))
    assert out[0, 0] == pytest.approx(0.3)


def test_em_step_mean_field_coupling():
    # drift = mean state: two-particle cloud {0, 2} shifts by its mean
    spec = make_lq1d(b2=0.0, beta=1.0, sigma0=0.0, qx=0.0, gx=0.0)
    x = np.array([[0.0], [2.0]])
    out = em_step(spec, 0.0, 1.0, x, np.zeros((2, 1)), np.zeros((2, 1)))
    assert np.allclose(out, [[1.0], [3.0]])


def test_simulate_zero_dynamics_constant_paths(zero_spec):
    part = Partition.uniform(4, 1.0)
    store = store_for(part, m=8)
    zero_spec.initial_law = DiracLaw([0.7])
    traj = simulate_discrete(zero_spec, part, ControlPath.constant(part, 8, [0.3]), store)
    assert np.all(traj.states == 0.7)


def test_simulate_deterministic_euler_recursion():
    spec = make_lq1d(b1=-1.0, b2=0.0, sigma0=0.0, qx=0.0, gx=0.0,
                     initial_law=DiracLaw([1.0]))
    part = Partition.uniform(2, 1.0)
    store = store_for(part, m=3, seed=1)
    traj = simulate_discrete(spec, part, ControlPath.constant(part, 3, [0.0]), store)
    assert np.allclose(traj.states[-1], 0.25)


def test_simulate_refinement_bit_identity():
    # pure diffusion, unit sigma: quantized increments sum exactly
    spec = make_lq1d(b2=0.0, qx=0.0, gx=0.0)
    store = BrownianStore(7, 128, 1, 1.0, 8)
    t4 = simulate_discrete(spec, Partition.uniform(4, 1.0),
                           ControlPath.constant(Partition.uniform(4, 1.0), 128, [0.0]), store)
    t8 = simulate_discrete(spec, Partition.uniform(8, 1.0),
                           ControlPath.constant(Partition.uniform(8, 1.0), 128, [0.0]), store)
    assert np.array_equal(t4.states[-1], t8.states[-1])


def test_divergence_guard():
    spec = make_lq1d(b1=1e9, b2=0.0, sigma0=0.0, initial_law=DiracLaw([1.0]))
    part = Partition.uniform(4, 1.0)
    store = store_for(part, m=2, seed=2)
    with pytest.raises(DivergenceError) as err:
        simulate_discrete(spec, part, ControlPath.constant(part, 2, [0.0]), store)
    assert err.value.step is not None


def test_mean_field_decoupling_bit_exact():
    # no mean couplings, law-independent costs: designated particle 0
    # coincides bit-exactly between M=1 and M=1000 runs
    spec = make_lq1d()  # beta = gamma = sigma2 = 0; costs use means but not dynamics
    part = Partition.uniform(8, 1.0)
    big = BrownianStore(21, 1000, 1, 1.0, 8)
    small = BrownianStore(21, 1, 1, 1.0, 8)
    cp_big = ControlPath.constant(part, 1000, [0.4])
    cp_small = ControlPath.constant(part, 1, [0.4])
    t_big = simulate_discrete(spec, part, cp_big, big)
    t_small = simulate_discrete(spec, part, cp_small, small)
    assert np.array_equal(t_big.states[:, 0, :], t_small.states[:, 0, :])


def test_exchangeability_canonical_order():
    # relabeling particles permutes per-sample outputs; restoring id order
    # restores bit-identical reductions
    spec = make_lq1d()
    part = Partition.uniform(4, 1.0)
    store = store_for(part, m=32, seed=3)
    rng = np.random.default_rng(0)
    perm = rng.permutation(32)
    cp = ControlPath(part, rng.standard_normal((4, 32, 1)))
    traj = simulate_discrete(spec, part, cp, store)
    samples = per_sample_cost(spec, part, traj, cp.values)
    permuted = samples[perm]
    restored = permuted[np.argsort(perm)]
    assert np.array_equal(restored, samples)
    assert np.mean(restored[np.argsort(np.arange(32))]) == np.mean(samples)


# ---------------------------------------------------------------------------
# fine-grid simulation


def test_fine_embedding_changes_only_at_coarse_knots():
    coarse = Partition.uniform(2, 1.0)
    fine = Partition.uniform(8, 1.0)
    cp = ControlPath(coarse, np.arange(2, dtype=float).reshape(2, 1, 1) + 1.0)
    emb = embed_control_to_partition(cp, fine)
    assert np.allclose(emb.values[:4], 1.0) and np.allclose(emb.values[4:], 2.0)


class _NegativeStateFeedback:
    def controls_at(self, t, X):
        return -X


def test_fine_feedback_tracks_exponential_decay():
    # closed loop alpha = -x with drift = alpha: Euler solution of x' = -x
    spec = make_lq1d(sigma0=0.0, initial_law=DiracLaw([1.0]))
    n_fine = 64
    fine = Partition.uniform(n_fine, 1.0)
    store = store_for(fine, m=2, seed=4)
    traj = simulate_fine(spec, fine, _NegativeStateFeedback(), store)
    assert abs(traj.states[-1][0, 0] - np.exp(-1.0)) <= 2.0 / n_fine


def test_fine_zero_control_matches_discrete_bitwise():
    spec = make_lq1d(b2=0.0, qx=0.0, gx=0.0)
    fine = Partition.uniform(8, 1.0)
    store = store_for(fine, m=16, seed=5)
    cp = ControlPath.constant(fine, 16, [0.0])
    a = simulate_discrete(spec, fine, cp, store)
    b = simulate_fine(spec, fine, cp, store)
    assert np.array_equal(a.states, b.states)


# ---------------------------------------------------------------------------
# costs


def constant_running_cost_spec(zero_spec):
    cost = zero_cost_model()
    cost.f = lambda t, X, A, eta: np.ones(np.atleast_2d(X).shape[0])
    zero_spec.cost = cost
    return zero_spec


def test_cost_constant_f_integrates_horizon(zero_spec):
    spec = constant_running_cost_spec(zero_spec)
    part = Partition.uniform(5, 1.0)
    store = store_for(part, m=7, seed=6)
    cp = ControlPath.constant(part, 7, [0.2])
    traj = simulate_discrete(spec, part, cp, store)
    value, mc = cost_discrete(spec, part, traj, cp)
    assert value == pytest.approx(1.0, abs=1e-15)
    assert mc == 0.0


def test_cost_quadratic_state_constant_paths():
    spec = make_lq1d(b2=0.0, sigma0=0.0, q=0.0, gx=0.0, initial_law=DiracLaw([1.0]))
    part = Partition.uniform(4, 1.0)
    store = store_for(part, m=3, seed=7)
    cp = ControlPath.constant(part, 3, [0.0])
    traj = simulate_discrete(spec, part, cp, store)
    value, _ = cost_discrete(spec, part, traj, cp)
    assert value == pytest.approx(0.5, abs=1e-15)


def test_cost_zero_problem_identically_zero(zero_spec):
    part = Partition.uniform(6, 1.0)
    store = store_for(part, m=9, seed=8)
    rng = np.random.default_rng(1)
    cp = ControlPath(part, rng.standard_normal((6, 9, 1)))
    traj = simulate_discrete(zero_spec, part, cp, store)
    value, mc = cost_discrete(zero_spec, part, traj, cp)
    assert value == 0.0 and mc == 0.0


def test_cost_grid_mismatch_raises():
    spec = make_lq1d()
    p1 = Partition.uniform(4, 1.0)
    p2 = Partition.uniform(8, 1.0)
    store = store_for(p1, m=4, seed=9)
    cp = ControlPath.constant(p1, 4, [0.0])
    traj = simulate_discrete(spec, p1, cp, store)
    with pytest.raises(ConfigurationError):
        cost_discrete(spec, p2, traj, ControlPath.constant(p2, 4, [0.0]))


def test_cost_fine_uses_carried_controls():
    spec = make_lq1d()
    fine = Partition.uniform(8, 1.0)
    store = store_for(fine, m=32, seed=10)
    coarse = Partition.uniform(2, 1.0)
    cp = ControlPath.constant(coarse, 32, [0.1])
    traj = simulate_fine(spec, fine, cp, store)
    v1, _ = cost_fine(spec, fine, traj)
    v2, _ = cost_fine(spec, fine, traj, control_source=cp)
    assert v1 == v2


# ---------------------------------------------------------------------------
# control transport and distances


def test_project_control_identity_and_left_endpoint():
    fine = Partition.uniform(4, 1.0)
    vals = np.arange(1.0, 5.0).reshape(4, 1, 1)
    cp = ControlPath(fine, vals)
    same = project_control_to_partition(cp, fine)
    assert np.array_equal(same.values, vals)
    coarse = project_control_to_partition(cp, Partition.uniform(2, 1.0))
    assert coarse.values[:, 0, 0].tolist() == [1.0, 3.0]


def test_project_control_rejects_non_nested():
    fine = Partition.uniform(6, 1.0)
    cp = ControlPath(fine, np.zeros((6, 1, 1)))
    with pytest.raises(ConfigurationError):
        project_control_to_partition(cp, Partition.uniform(4, 1.0))


def test_projection_distance_bound_for_root_h_increments():
    # control with |increments| <= L sqrt(h) per fine step: distance to its
    # coarsening is <= L sqrt(coarse mesh) sqrt(T)
    L = 0.8
    n_fine, ratio = 64, 8
    fine = Partition.uniform(n_fine, 1.0)
    rng = np.random.default_rng(2)
    steps = L * np.sqrt(1.0 / n_fine) * rng.uniform(-1, 1, size=(n_fine, 1, 1))
    vals = np.cumsum(steps, axis=0)
    cp = ControlPath(fine, vals)
    coarse = Partition.uniform(n_fine // ratio, 1.0)
    proj = project_control_to_partition(cp, coarse)
    emb = embed_control_to_partition(proj, fine)
    dist = h2_distance(cp, emb)
    assert dist <= L * np.sqrt(coarse.mesh) * np.sqrt(1.0)


def test_h2_distance_examples():
    part = Partition.uniform(5, 2.0)
    a = ControlPath(part, np.zeros((5, 3, 1)))
    b = ControlPath(part, np.zeros((5, 3, 1)))
    assert h2_distance(a, b) == 0.0
    c = ControlPath(part, np.full((5, 3, 1), 0.7))
    assert h2_distance(a, c) == pytest.approx(0.7 * np.sqrt(2.0))


def test_h2_distance_brute_force_oracle():
    part = Partition(np.array([0.0, 0.2, 0.5, 1.0]))
    rng = np.random.default_rng(3)
    va = rng.standard_normal((3, 4, 2))
    vb = rng.standard_normal((3, 4, 2))
    fast = h2_distance(ControlPath(part, va), ControlPath(part, vb))
    acc = 0.0
    hs = np.diff(part.grid)
    for m in range(4):
        for i in range(3):
            acc += np.sum((va[i, m] - vb[i, m]) ** 2) * hs[i]
    slow = np.sqrt(acc / 4)
    assert abs(fast - slow) <= 1e-14


def test_wasserstein_1d_examples():
    a = EmpiricalMeasure(np.array([[0.0], [1.0]]))
    assert wasserstein2_1d(a, a) == 0.0
    b = EmpiricalMeasure(np.array([[1.0], [2.0]]))
    assert wasserstein2_1d(a, b) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((20, 1))
    shifted = EmpiricalMeasure(pts + 0.35)
    assert wasserstein2_1d(EmpiricalMeasure(pts), shifted) == pytest.approx(0.35)
    with pytest.raises(ConfigurationError):
        wasserstein2_1d(a, EmpiricalMeasure(np.zeros((3, 1))))


# ---------------------------------------------------------------------------
# strong convexity of the control-to-cost map (frozen noise)


def test_per_sample_cost_midpoint_strong_convexity():
    spec = make_lq1d(qbar=0.3, r=0.5, gamma=0.2, beta=0.1)
    lam = spec.cost.lambda1 + spec.cost.lambda2
    part = Partition.uniform(8, 1.0)
    store = store_for(part, m=48, seed=11)
    rng = np.random.default_rng(5)

    def j(values):
        cp = ControlPath(part, values)
        traj = simulate_discrete(spec, part, cp, store)
        return cost_discrete(spec, part, traj, cp)[0]

    for _ in range(30):
        va = rng.standard_normal((8, 48, 1))
        vb = rng.standard_normal((8, 48, 1))
        mid = j(0.5 * (va + vb))
        gap = 0.5 * j(va) + 0.5 * j(vb) - mid
        d2 = h2_distance(ControlPath(part, va), ControlPath(part, vb)) ** 2
        assert gap >= 0.25 * lam * d2 - 1e-9
