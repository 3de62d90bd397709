import numpy as np
import pytest

from mfclab.errors import ConfigurationError
from mfclab.model import (
    ActionSet,
    CostModel,
    DiracLaw,
    EmpiricalMeasure,
    GaussianLaw,
    Partition,
    eval_hamiltonian,
    eval_reduced_hamiltonian,
    step_function,
    terminal_adjoint,
    validate_assumptions,
)
from mfclab.problems import make_lq1d


def random_measure(rng, m=6):
    return EmpiricalMeasure(rng.standard_normal((m, 2)))


# ---------------------------------------------------------------------------
# Hamiltonians


def test_hamiltonian_zero_case(zero_spec):
    eta = EmpiricalMeasure(np.zeros((3, 2)))
    assert eval_hamiltonian(zero_spec, 0.3, [0.7], [0.1], eta, [2.0], [[1.0]]) == 0.0


def test_hamiltonian_hand_value():
    # drift = control, no diffusion pairing, running cost (x^2+a^2)/2:
    # H = a*y + f = 2*3 + (1+4)/2 = 8.5
    spec = make_lq1d(sigma0=0.0)
    eta = random_measure(np.random.default_rng(0))
    val = eval_hamiltonian(spec, 0.5, [1.0], [2.0], eta, [3.0], [[0.0]])
    assert val == pytest.approx(8.5, abs=1e-12)


def test_hamiltonian_reduces_to_cost_at_zero_multipliers():
    spec = make_lq1d()
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, a = rng.standard_normal(2)
        eta = random_measure(rng)
        h = eval_hamiltonian(spec, 0.2, [x], [a], eta, [0.0], [[0.0]])
        f = float(spec.cost.f(0.2, np.array([[x]]), np.array([[a]]), eta)[0])
        assert h == pytest.approx(f, abs=1e-14)


def test_reduced_hamiltonian_definitional_identity():
    spec = make_lq1d(sigma1=0.3, sigma2=0.2)
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, a, y = rng.standard_normal(3)
        eta = random_measure(rng)
        full = eval_hamiltonian(spec, 0.7, [x], [a], eta, [y], [[0.0]])
        red = eval_reduced_hamiltonian(spec, 0.7, [x], [a], eta, [y])
        assert full == red


def test_reduced_hamiltonian_lq_value():
    # b2 = 1, q = 1, state cost zero at x = 0: H_re = y*a + a^2/2 = 1.5
    spec = make_lq1d()
    eta = random_measure(np.random.default_rng(3))
    val = eval_reduced_hamiltonian(spec, 0.0, [0.0], [1.0], eta, [1.0])
    assert val == pytest.approx(1.5, abs=1e-14)


def test_hamiltonian_affine_in_multipliers():
    spec = make_lq1d(sigma1=0.4)
    rng = np.random.default_rng(4)
    for _ in range(25):
        x, a = rng.standard_normal(2)
        eta = random_measure(rng)
        y1, y2 = rng.standard_normal(2)
        z1, z2 = rng.standard_normal(2)
        lam = rng.uniform()
        h1 = eval_hamiltonian(spec, 0.1, [x], [a], eta, [y1], [[z1]])
        h2 = eval_hamiltonian(spec, 0.1, [x], [a], eta, [y2], [[z2]])
        hc = eval_hamiltonian(
            spec, 0.1, [x], [a], eta,
            [lam * y1 + (1 - lam) * y2], [[lam * z1 + (1 - lam) * z2]],
        )
        f0 = eval_hamiltonian(spec, 0.1, [x], [a], eta, [0.0], [[0.0]])
        # affine: H(convex combo) = combo of H values (common f offset cancels)
        assert hc == pytest.approx(lam * h1 + (1 - lam) * h2 + 0 * f0, rel=1e-12)


def test_hamiltonian_minus_reduced_is_diffusion_pairing():
    spec = make_lq1d(sigma0=0.7, sigma1=0.2, sigma2=0.1)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, a, y, z = rng.standard_normal(4)
        eta = random_measure(rng)
        full = eval_hamiltonian(spec, 0.3, [x], [a], eta, [y], [[z]])
        red = eval_reduced_hamiltonian(spec, 0.3, [x], [a], eta, [y])
        xbar = eta.mean()[0]
        sig = 0.7 + 0.2 * x + 0.1 * xbar
        assert full - red == pytest.approx(sig * z, abs=1e-12)


def test_hamiltonian_dimension_errors(zero_spec):
    eta = EmpiricalMeasure(np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        eval_hamiltonian(zero_spec, 0.0, [0.0, 1.0], [0.0], eta, [0.0], [[0.0]])
    from mfclab.errors import NumericalInputError

    with pytest.raises(NumericalInputError):
        eval_hamiltonian(zero_spec, 0.0, [np.nan], [0.0], eta, [0.0], [[0.0]])


# ---------------------------------------------------------------------------
# terminal adjoint


def test_terminal_adjoint_law_independent_quadratic():
    spec = make_lq1d()  # g = x^2/2, no mean term
    mu = EmpiricalMeasure(np.random.default_rng(0).standard_normal((8, 1)))
    x = np.array([[1.3], [-0.4]])
    out = terminal_adjoint(spec, x, mu)
    assert np.allclose(out, x)


def test_terminal_adjoint_zero_cost(zero_spec):
    mu = EmpiricalMeasure(np.ones((4, 1)))
    assert np.all(terminal_adjoint(zero_spec, np.array([[2.0]]), mu) == 0.0)


def tracking_cost_model():
    """g(x, mu) = (x - mean(mu))^2 / 2 with its exact kernels."""

    def g(X, mu):
        return 0.5 * (X[:, 0] - mu.mean()[0]) ** 2

    def grad_x_g(X, mu):
        return X - mu.mean()[0]

    def grad_mu_g(x, mu):
        val = -(x[0] - mu.mean()[0])

        def kernel(Xq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    base = make_lq1d().cost
    return CostModel(
        f=base.f, g=g, grad_x_f=base.grad_x_f, grad_a_f=base.grad_a_f,
        grad_x_g=grad_x_g, grad_mu_f=base.grad_mu_f, grad_nu_f=base.grad_nu_f,
        grad_mu_g=grad_mu_g, lambda1=0.5, lambda2=0.0,
    )


def test_terminal_adjoint_brute_force_cloud():
    # lifted-cloud identity: ghat(x_m) = M * d/dx_m [ mean_j g(x_j, mu) ]
    spec = make_lq1d()
    spec.cost = tracking_cost_model()
    cloud = np.array([[0.0], [2.0]])
    mu = EmpiricalMeasure(cloud)
    out = terminal_adjoint(spec, np.array([1.0]), mu)
    # direct formula at x=1 over {0,2}: grad_x g = 0; kernel avg = -(mean(x_j)-1) = 0
    assert out == pytest.approx(0.0, abs=1e-14)

    eps = 1e-6
    for j in range(2):
        up, dn = cloud.copy(), cloud.copy()
        up[j, 0] += eps
        dn[j, 0] -= eps
        lifted = lambda pts: np.mean(spec.cost.g(pts, EmpiricalMeasure(pts)))
        fd = 2 * (lifted(up) - lifted(dn)) / (2 * eps)
        expect = terminal_adjoint(spec, cloud[j], mu)[0]
        assert fd == pytest.approx(expect, abs=1e-6)


# ---------------------------------------------------------------------------
# action sets


def test_action_set_projection_properties():
    rng = np.random.default_rng(7)
    sets = [
        ActionSet("full"),
        ActionSet("box", lo=[-0.5, 0.0], hi=[1.0, 2.0]),
        ActionSet("ball", center=[0.5, -0.5], radius=1.2),
    ]
    for action in sets:
        v = rng.standard_normal((50, 2)) * 3
        once = action.project(v)
        assert np.array_equal(action.project(once), once)
        u = rng.standard_normal((50, 2)) * 3
        pu, pv = action.project(u), action.project(v)
        assert np.all(
            np.linalg.norm(pu - pv, axis=1) <= np.linalg.norm(u - v, axis=1) + 1e-12
        )


def test_action_set_bound_radius():
    assert ActionSet("full").bound_radius is None
    assert ActionSet("box", lo=[-1.0], hi=[2.0]).bound_radius == pytest.approx(2.0)
    assert ActionSet("ball", center=[1.0], radius=0.5).bound_radius == pytest.approx(1.5)
    assert ActionSet("box", lo=[0.0], hi=[np.inf]).bound_radius is None


def test_tangent_step_box_kkt():
    action = ActionSet("box", lo=[0.0], hi=[np.inf])
    # at the corner with outward gradient the mapped direction vanishes
    v = action.project(np.array([[0.0]]))
    g = np.array([[1.0]])  # pushes below lo
    assert np.all(action.tangent_step(v, g) == 0.0)
    g = np.array([[-1.0]])  # interior-pointing: passes through
    assert np.all(action.tangent_step(v, g) == 1.0)


# ---------------------------------------------------------------------------
# measures, partitions, laws


def test_empirical_measure_basics():
    pts = np.array([[0.0, 1.0], [2.0, 3.0]])
    eta = EmpiricalMeasure(pts)
    assert eta.size == 2 and eta.dim == 2
    assert np.allclose(eta.mean(), [1.0, 2.0])
    assert eta.marginal(0, 1).points.shape == (2, 1)
    assert eta.norm2() == pytest.approx(np.sqrt(np.mean(np.sum(pts**2, axis=1))))


def test_partition_invariants():
    part = Partition.uniform(4, 2.0)
    assert part.n_steps == 4 and part.mesh == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        Partition(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ConfigurationError):
        Partition(np.array([0.1, 0.5, 1.0]))
    fine = Partition.uniform(8, 2.0)
    assert fine.refines(part) and not part.refines(fine)
    assert list(fine.index_of(part.grid)) == [0, 2, 4, 6, 8]


def test_step_function_left_constant():
    fn = step_function([0.0, 0.5, 1.0], [np.array(1.0), np.array(2.0)])
    assert fn(0.0) == 1.0 and fn(0.49) == 1.0 and fn(0.5) == 2.0 and fn(1.0) == 2.0


def test_initial_laws():
    law = DiracLaw([1.5])
    assert np.all(law.sample(0, 3) == 1.5)
    assert law.norm_lp(4) == pytest.approx(1.5)
    g = GaussianLaw([0.0], [1.0])
    s1 = g.sample(42, 5)
    s2 = g.sample(42, 9)
    assert np.array_equal(s1, s2[:5])  # prefix property for particle coupling
    assert g.norm_lp(2) == pytest.approx(1.0, rel=1e-6)
    # E|Z|^4 = 3 -> L4 norm 3^(1/4)
    assert g.norm_lp(4) == pytest.approx(3 ** 0.25, rel=1e-6)


# ---------------------------------------------------------------------------
# assumption validation


def test_validate_lq_passes():
    report = validate_assumptions(make_lq1d(), probes=25, seed=0)
    assert report.all_passed, [c.to_json() for c in report.clauses if not c.passed]


def test_validate_flags_degenerate_convexity():
    # q = 0 with no state cost: declared moduli collapse to zero
    spec = make_lq1d(q=0.0, qx=0.0)
    report = validate_assumptions(spec, probes=5, seed=0)
    clause = report.clause("convexity")
    assert not clause.passed


def test_validate_flags_time_jump():
    jumpy = step_function([0.0, 0.5, 1.0], [np.array(0.0), np.array(0.8)])
    spec = make_lq1d(c=jumpy)
    report = validate_assumptions(spec, probes=5, seed=1)
    assert not report.clause("time_holder").passed


def test_validate_accepts_sqrt_roughness():
    # |t - T/2|^(1/2) is exactly half-Hoelder: ratios stay flat
    spec = make_lq1d(c=lambda t: 0.5 * np.sqrt(abs(t - 0.5)))
    report = validate_assumptions(spec, probes=10, seed=2)
    assert report.clause("time_holder").passed
    assert report.clause("convexity").passed


def test_validate_catches_wrong_gradient():
    spec = make_lq1d()
    base = spec.cost
    spec.cost = CostModel(
        f=base.f, g=base.g,
        grad_x_f=lambda t, X, A, eta: 2.0 * base.grad_x_f(t, X, A, eta),
        grad_a_f=base.grad_a_f, grad_x_g=base.grad_x_g,
        grad_mu_f=base.grad_mu_f, grad_nu_f=base.grad_nu_f, grad_mu_g=base.grad_mu_g,
        lambda1=base.lambda1, lambda2=base.lambda2,
    )
    report = validate_assumptions(spec, probes=10, seed=0)
    assert not report.clause("derivative_consistency").passed


def test_validation_report_serializes():
    report = validate_assumptions(make_lq1d(), probes=5, seed=0)
    payload = report.to_json()
    assert payload["all_passed"] is True
    assert {c["name"] for c in payload["clauses"]} >= {
        "coefficient_boundedness", "derivative_consistency", "convexity", "time_holder",
    }
