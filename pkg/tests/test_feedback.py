import numpy as np
import pytest

from mfclab.errors import InvariantViolationError
from mfclab.feedback import (
    ExpectedHamiltonianMap,
    LQClosedFormMap,
    LQCoefficients,
    ModifiedHamiltonianMap,
    lq_feedback,
    lq_psi_zeta,
    make_feedback_map,
    optimality_residual,
    pushforward_phi,
    stationarity_field,
)
from mfclab.model import ActionSet, EmpiricalMeasure, wasserstein2_cloud
from mfclab.problems import make_example1, make_example2, make_lq1d


def cloud(rng, m=40):
    return EmpiricalMeasure(rng.standard_normal((m, 2)))


# ---------------------------------------------------------------------------
# closed-form LQ map


def test_psi_zeta_vanishing_cases():
    assert lq_psi_zeta(LQCoefficients(q=1.0, qbar=0.0, r=0.7), 0.1) == (0.0, 0.0)
    assert lq_psi_zeta(LQCoefficients(q=1.0, qbar=2.0, r=2.0), 0.5) == (0.0, 0.0)


def test_psi_zeta_hand_value():
    cf = LQCoefficients(q=1.0, qbar=1.0, r=1.0, c=0.0, b2=1.0, gamma=0.0)
    psi, zeta = lq_psi_zeta(cf, 0.0)
    assert psi == pytest.approx(0.0) and zeta == pytest.approx(-1.0)


def test_psi_zeta_invalid_denominator():
    cf = LQCoefficients(q=-1.0)
    with pytest.raises(InvariantViolationError):
        lq_psi_zeta(cf, 0.0)


def test_lq_feedback_classical():
    cf = LQCoefficients(q=1.0)
    y = np.array([0.3, -1.2])
    assert np.allclose(lq_feedback(cf, 0.0, np.zeros(2), y, 0.0, 0.0), -y)


def test_lq_feedback_mean_field_hand_value():
    cf = LQCoefficients(q=1.0, qbar=1.0, r=1.0, c=0.0, b2=1.0, gamma=0.0)
    val = lq_feedback(cf, 0.0, 0.0, 1.0, 0.0, 1.0)
    assert val == pytest.approx(-1.0)


def test_lq_feedback_zero_adjoint():
    cf = LQCoefficients(q=2.0)
    assert lq_feedback(cf, 0.0, 0.0, 0.0, 0.0, 0.0) == 0.0


def first_order_residual(cf, t, x, y, alpha):
    """Pointwise residual of the LQ stationarity condition on a cloud."""
    abar = alpha.mean()
    ybar = y.mean()
    return (
        cf.b2(t) * y + cf.gamma(t) * ybar + (cf.q(t) + cf.qbar(t)) * alpha
        + cf.qbar(t) * cf.r(t) * (cf.r(t) - 2.0) * abar + cf.c(t) * x
    )


def test_lq_feedback_satisfies_first_order_condition():
    rng = np.random.default_rng(0)
    cf = LQCoefficients(q=1.3, qbar=0.7, r=0.4, c=0.2, b2=1.1, gamma=-0.3, qx=1.0)
    x = rng.standard_normal(60)
    y = rng.standard_normal(60)
    alpha = lq_feedback(cf, 0.2, x, y, x.mean(), y.mean())
    resid = first_order_residual(cf, 0.2, x, y, alpha)
    assert np.max(np.abs(resid)) <= 1e-12


# ---------------------------------------------------------------------------
# modified-Hamiltonian minimizer (state-marginal costs)


def test_modified_hamiltonian_matches_quadratic_closed_form():
    # f = (qx x^2 + q a^2)/2 depends on the law only through the state
    # marginal; the minimizer of the modified objective is
    # -(b2 y + beta_a mean(rho)) / q
    spec = make_lq1d(gamma=0.25)
    fmap = ModifiedHamiltonianMap(spec, tol_inner=1e-12)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((30, 1))
    Y = rng.standard_normal((30, 1))
    chi = EmpiricalMeasure.joint(X, Y)
    out = fmap.evaluate(0.3, X, Y, chi)
    expected = -(1.0 * Y + 0.25 * Y.mean())
    assert np.allclose(out, expected, atol=1e-10)


def test_modified_hamiltonian_zero_case():
    spec = make_lq1d()
    fmap = ModifiedHamiltonianMap(spec)
    X = np.zeros((5, 1))
    Y = np.zeros((5, 1))
    out = fmap.evaluate(0.0, X, Y, EmpiricalMeasure.joint(X, Y))
    assert np.allclose(out, 0.0, atol=1e-12)


def test_modified_hamiltonian_projection_active():
    # unconstrained minimizer -y = -1; box [0, inf) clips to 0 and the
    # tangent residual vanishes there (KKT)
    spec = make_lq1d(action=ActionSet("box", lo=[0.0], hi=[np.inf]))
    fmap = ModifiedHamiltonianMap(spec, tol_inner=1e-11)
    X = np.zeros((4, 1))
    Y = np.ones((4, 1))
    out = fmap.evaluate(0.0, X, Y, EmpiricalMeasure.joint(X, Y))
    assert np.allclose(out, 0.0, atol=1e-11)
    grad = 1.0 * Y + out  # d/da [a y + a^2/2]
    assert np.max(np.abs(spec.action.tangent_step(out, grad))) <= 1e-10


def test_modified_hamiltonian_first_order_inequality():
    spec = make_example1()
    fmap = make_feedback_map(spec, tol_inner=1e-11)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((25, 1))
    Y = rng.standard_normal((25, 1))
    chi = EmpiricalMeasure.joint(X, Y)
    astar = fmap.evaluate(0.4, X, Y, chi)
    rho_bar = Y.mean(axis=0)
    eta_tilde = EmpiricalMeasure(np.column_stack([X, np.zeros_like(X)]))
    grad = (
        Y @ spec.dynamics.b2(0.4)
        + spec.dynamics.beta_a(0.4).T @ rho_bar
        + spec.cost.grad_a_f(0.4, X, astar, eta_tilde)
    )
    for _ in range(100):
        a = spec.action.project(rng.standard_normal((25, 1)) * 2)
        assert np.all(np.sum(grad * (astar - a), axis=1) <= 1e-8)


# ---------------------------------------------------------------------------
# expected-Hamiltonian minimizer (deterministic controls)


def test_expected_hamiltonian_closed_form():
    spec = make_example2(kappa_nu=0.0, kappa_mean=0.0, gamma=0.8)
    fmap = ExpectedHamiltonianMap(spec, tol_inner=1e-12)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((50, 1))
    Y = rng.standard_normal((50, 1))
    chi = EmpiricalMeasure.joint(X, Y)
    out = fmap.evaluate(0.1, X, Y, chi)
    assert np.allclose(out, -0.8 * Y.mean(), atol=1e-10)
    assert np.all(out == out[0])  # one shared action


def test_expected_hamiltonian_zero_cloud():
    spec = make_example2()
    fmap = ExpectedHamiltonianMap(spec)
    X = np.zeros((6, 1))
    Y = np.zeros((6, 1))
    out = fmap.evaluate(0.0, X, Y, EmpiricalMeasure.joint(X, Y))
    assert np.allclose(out, 0.0, atol=1e-11)


def test_expected_hamiltonian_depends_on_moments_only():
    spec = make_example2()
    fmap = ExpectedHamiltonianMap(spec, tol_inner=1e-12)
    # two clouds with identical means, different shapes
    X1 = np.array([[1.0], [-1.0], [0.5], [-0.5]])
    Y1 = np.array([[0.2], [0.6], [-0.4], [0.8]])
    X2 = np.array([[2.0], [-2.0], [0.0], [0.0]])
    Y2 = np.full((4, 1), Y1.mean())
    out1 = fmap.evaluate(0.2, X1, Y1, EmpiricalMeasure.joint(X1, Y1))
    out2 = fmap.evaluate(0.2, X2, Y2, EmpiricalMeasure.joint(X2, Y2))
    assert np.allclose(out1, out2, atol=1e-9)


def test_expected_hamiltonian_ignores_pointwise_arguments():
    spec = make_example2()
    fmap = ExpectedHamiltonianMap(spec, tol_inner=1e-12)
    rng = np.random.default_rng(4)
    Xc = rng.standard_normal((30, 1))
    Yc = rng.standard_normal((30, 1))
    chi = EmpiricalMeasure.joint(Xc, Yc)
    outs = [
        fmap.evaluate(0.5, rng.standard_normal((30, 1)), rng.standard_normal((30, 1)), chi)
        for _ in range(10)
    ]
    for out in outs[1:]:
        assert np.allclose(out, outs[0], atol=1e-10)


# ---------------------------------------------------------------------------
# pushforward and optimality residual


def test_pushforward_marginal_identity():
    spec = make_lq1d()
    fmap = LQClosedFormMap(spec)
    rng = np.random.default_rng(5)
    chi = cloud(rng)
    phi = pushforward_phi(fmap, 0.3, chi, n=1)
    alpha = fmap.evaluate(0.3, chi.points[:, :1], chi.points[:, 1:], chi)
    assert phi.size == chi.size
    assert phi.mean()[1] == pytest.approx(alpha.mean())
    assert np.array_equal(phi.points[:, :1], chi.points[:, :1])


def test_pushforward_pointwise_lq():
    spec = make_lq1d()  # alpha = -y
    fmap = LQClosedFormMap(spec)
    chi = EmpiricalMeasure(np.array([[1.0, 2.0], [3.0, -4.0]]))
    phi = pushforward_phi(fmap, 0.0, chi, n=1)
    assert np.allclose(phi.points, [[1.0, -2.0], [3.0, 4.0]])


def test_pushforward_deterministic_map_constant_actions():
    spec = make_example2()
    fmap = make_feedback_map(spec)
    rng = np.random.default_rng(6)
    phi = pushforward_phi(fmap, 0.2, cloud(rng), n=1)
    actions = phi.points[:, 1]
    assert np.all(actions == actions[0])


def test_optimality_residual_lq_stationary():
    spec = make_lq1d(qbar=0.5, r=0.6, c=0.1, gamma=0.2)
    fmap = LQClosedFormMap(spec)
    rng = np.random.default_rng(7)
    X = rng.standard_normal((200, 1))
    Y = rng.standard_normal((200, 1))
    assert optimality_residual(spec, fmap, 0.4, X, Y) <= 1e-10


def test_optimality_residual_detects_perturbation():
    spec = make_lq1d()

    class Perturbed(LQClosedFormMap):
        def evaluate(self, t, X, Y, chi, a0=None):
            return super().evaluate(t, X, Y, chi) + 0.1

    rng = np.random.default_rng(8)
    X = rng.standard_normal((100, 1))
    Y = rng.standard_normal((100, 1))
    res = optimality_residual(spec, Perturbed(spec), 0.0, X, Y)
    assert res == pytest.approx(0.1, rel=1e-9)


def test_optimality_residual_zero_problem(zero_spec):
    class ZeroMap(LQClosedFormMap):
        def __init__(self):
            pass

        def evaluate(self, t, X, Y, chi, a0=None):
            return np.zeros((X.shape[0], 1))

    rng = np.random.default_rng(9)
    X = rng.standard_normal((10, 1))
    Y = rng.standard_normal((10, 1))
    assert optimality_residual(zero_spec, ZeroMap(), 0.0, X, Y) == 0.0


# ---------------------------------------------------------------------------
# probe-style map properties


def test_feedback_outputs_live_in_action_set():
    action = ActionSet("box", lo=[-0.3], hi=[0.3])
    specs = [
        make_lq1d(action=action),
        make_example1(action=action),
        make_example2(action=action),
    ]
    rng = np.random.default_rng(10)
    for spec in specs:
        fmap = make_feedback_map(spec, tol_inner=1e-10)
        X = 2 * rng.standard_normal((20, 1))
        Y = 2 * rng.standard_normal((20, 1))
        out = fmap.evaluate(0.3, X, Y, EmpiricalMeasure.joint(X, Y))
        assert np.array_equal(spec.action.project(out), out)


def test_feedback_lipschitz_probe_stable():
    spec = make_lq1d(qbar=0.4, r=0.3, c=0.2, gamma=0.1)
    fmap = LQClosedFormMap(spec)
    rng = np.random.default_rng(11)

    def fitted_constant(n_pairs):
        worst = 0.0
        for _ in range(n_pairs):
            X1, Y1 = rng.standard_normal((2, 15, 1))
            X2, Y2 = rng.standard_normal((2, 15, 1))
            chi1 = EmpiricalMeasure.joint(X1, Y1)
            chi2 = EmpiricalMeasure.joint(X2, Y2)
            a1 = fmap.evaluate(0.5, X1, Y1, chi1)
            a2 = fmap.evaluate(0.5, X2, Y2, chi2)
            num = float(np.max(np.abs(a1 - a2)))
            den = float(
                np.max(np.abs(X1 - X2)) + np.max(np.abs(Y1 - Y2))
                + wasserstein2_cloud(chi1, chi2)
            )
            worst = max(worst, num / den)
        return worst

    l1 = fitted_constant(40)
    l2 = fitted_constant(40)
    assert np.isfinite(l1) and np.isfinite(l2)
    assert max(l1, l2) <= 2.5 * min(l1, l2)


def test_feedback_constant_coefficients_time_invariant():
    spec = make_lq1d(qbar=0.4, r=0.3)
    fmap = LQClosedFormMap(spec)
    rng = np.random.default_rng(12)
    X, Y = rng.standard_normal((2, 10, 1))
    chi = EmpiricalMeasure.joint(X, Y)
    a = fmap.evaluate(0.1, X, Y, chi)
    b = fmap.evaluate(0.9, X, Y, chi)
    assert np.array_equal(a, b)


def test_stationarity_field_matches_lq_formula():
    spec = make_lq1d(qbar=0.5, r=0.25, c=0.3, gamma=0.15)
    rng = np.random.default_rng(13)
    X = rng.standard_normal((50, 1))
    Y = rng.standard_normal((50, 1))
    alpha = rng.standard_normal((50, 1))
    s = stationarity_field(spec, 0.2, X, Y, alpha)
    expected = first_order_residual(
        spec.lq, 0.2, X[:, 0], Y[:, 0], alpha[:, 0]
    )
    assert np.allclose(s[:, 0], expected, atol=1e-12)
