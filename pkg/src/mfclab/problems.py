"""Built-in problem instances: lq1d, example1, example2.

lq1d is the scalar LQ family parameterized by :class:`LQCoefficients`
(closed-form feedback and an independent Riccati oracle apply).
example1 exercises the modified-Hamiltonian minimizer: quadratic state
costs with state-mean interaction, a pseudo-Huber control cost with no
closed-form minimizer, and mean-field terms in both drift channels.
example2 has no direct control-drift term and a separable cost, so its
optimal control is deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .feedback import LQCoefficients
from .model import (
    ActionSet,
    CostModel,
    DiracLaw,
    GaussianLaw,
    EmpiricalMeasure,
    LinearDynamics,
    ProblemSpec,
)

__all__ = [
    "lq_cost_model",
    "lq_dynamics",
    "make_lq1d",
    "make_example1",
    "make_example2",
    "get_problem",
    "BUILTIN_NAMES",
]


def _const_kernel(value, rows, cols):
    return np.tile(np.atleast_1d(value)[None, :], (rows, 1))[:, :cols]


def lq_cost_model(cf: LQCoefficients, horizon: float) -> CostModel:
    """Cost callables and declared convexity moduli for the LQ family.

    lambda1 is the grid minimum of (q - c^2/qx)/2 (Schur complement of the
    joint quadratic in (x, a)); the control-mean penalty adds nothing in
    the worst case, so lambda2 = 0.
    """

    def f(t, X, A, eta):
        x = X[:, 0]
        a = A[:, 0]
        em = eta.mean()
        xbar, abar = em[0], em[1]
        return 0.5 * (
            cf.qx(t) * x**2
            + cf.qbarx(t) * (x - cf.rx(t) * xbar) ** 2
            + cf.q(t) * a**2
            + cf.qbar(t) * (a - cf.r(t) * abar) ** 2
            + 2.0 * cf.c(t) * x * a
        )

    def g(X, mu):
        x = X[:, 0]
        xbar = mu.mean()[0]
        return 0.5 * (cf.gx * x**2 + cf.gmean * xbar**2)

    def grad_x_f(t, X, A, eta):
        em = eta.mean()
        return (
            cf.qx(t) * X
            + cf.qbarx(t) * (X - cf.rx(t) * em[0])
            + cf.c(t) * A
        )

    def grad_a_f(t, X, A, eta):
        em = eta.mean()
        return (
            cf.q(t) * A
            + cf.qbar(t) * (A - cf.r(t) * em[1])
            + cf.c(t) * X
        )

    def grad_x_g(X, mu):
        return cf.gx * X

    def grad_mu_f(t, x, a, eta):
        val = -cf.qbarx(t) * cf.rx(t) * (x[0] - cf.rx(t) * eta.mean()[0])

        def kernel(Xq, Aq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def grad_nu_f(t, x, a, eta):
        val = -cf.qbar(t) * cf.r(t) * (a[0] - cf.r(t) * eta.mean()[1])

        def kernel(Xq, Aq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def grad_mu_g(x, mu):
        val = cf.gmean * mu.mean()[0]

        def kernel(Xq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def avg_grad_mu_f(t, X, A, eta, Xq, Aq):
        em = eta.mean()
        val = -cf.qbarx(t) * cf.rx(t) * (X[:, 0].mean() - cf.rx(t) * em[0])
        return np.full((Xq.shape[0], 1), val)

    def avg_grad_nu_f(t, X, A, eta, Xq, Aq):
        em = eta.mean()
        val = -cf.qbar(t) * cf.r(t) * (A[:, 0].mean() - cf.r(t) * em[1])
        return np.full((Xq.shape[0], 1), val)

    def avg_grad_mu_g(mu, Xq):
        return np.full((np.atleast_2d(Xq).shape[0], 1), cf.gmean * mu.mean()[0])

    ts = np.linspace(0.0, horizon, 1000)
    lam1_vals = []
    for t in ts:
        q, qx, c = cf.q(t), cf.qx(t), cf.c(t)
        if qx > 0:
            lam1_vals.append(0.5 * (q - c**2 / qx))
        elif c == 0.0:
            lam1_vals.append(0.5 * q)
        else:
            lam1_vals.append(0.0)
    lam1 = max(0.0, float(min(lam1_vals)))

    return CostModel(
        f=f, g=g,
        grad_x_f=grad_x_f, grad_a_f=grad_a_f, grad_x_g=grad_x_g,
        grad_mu_f=grad_mu_f, grad_nu_f=grad_nu_f, grad_mu_g=grad_mu_g,
        lambda1=lam1, lambda2=0.0,
        avg_grad_mu_f=avg_grad_mu_f, avg_grad_nu_f=avg_grad_nu_f,
        avg_grad_mu_g=avg_grad_mu_g,
    )


def lq_dynamics(cf: LQCoefficients, horizon: float) -> LinearDynamics:
    return LinearDynamics(
        n=1, k=1, d=1, horizon=horizon,
        b0=lambda t: np.array([cf.b0(t)]),
        b1=lambda t: np.array([[cf.b1(t)]]),
        b2=lambda t: np.array([[cf.b2(t)]]),
        beta_x=lambda t: np.array([[cf.beta(t)]]),
        beta_a=lambda t: np.array([[cf.gamma(t)]]),
        sigma0=lambda t: np.array([[cf.sigma0(t)]]),
        sigma1=lambda t: np.array([[[cf.sigma1(t)]]]),
        sigma2=lambda t: np.array([[[cf.sigma2(t)]]]),
    )


def make_lq1d(
    coeffs: LQCoefficients = None,
    horizon: float = 1.0,
    initial_law=None,
    action: ActionSet = None,
    name: str = "lq1d",
    **coeff_overrides,
) -> ProblemSpec:
    """Scalar LQ instance; defaults give the plain anchor problem
    (drift = control, unit noise, cost ½(x²+a²), terminal ½x², x0 = 0)."""
    if coeffs is None:
        fields = {"qx": 1.0, "gx": 1.0}
        fields.update(coeff_overrides)
        coeffs = LQCoefficients(**fields)
    elif coeff_overrides:
        raise ConfigurationError("pass either coeffs or keyword overrides, not both")
    return ProblemSpec(
        dynamics=lq_dynamics(coeffs, horizon),
        cost=lq_cost_model(coeffs, horizon),
        action=action or ActionSet("full"),
        initial_law=initial_law if initial_law is not None else DiracLaw([0.0]),
        kind="lq1d",
        lq=coeffs,
        name=name,
    )


# ---------------------------------------------------------------------------
# example1: state-marginal cost, pseudo-Huber control penalty


def make_example1(
    horizon: float = 1.0,
    kappa_mean: float = 0.5,
    huber: float = 0.5,
    action: ActionSet = None,
    initial_law=None,
) -> ProblemSpec:
    dyn = LinearDynamics(
        n=1, k=1, d=1, horizon=horizon,
        b2=np.array([[1.0]]),
        beta_x=np.array([[0.2]]),
        beta_a=np.array([[0.3]]),
        sigma0=np.array([[0.8]]),
        sigma1=np.array([[[0.2]]]),
        sigma2=np.array([[[0.1]]]),
    )

    def f(t, X, A, eta):
        x = X[:, 0]
        a = A[:, 0]
        xbar = eta.mean()[0]
        return (
            0.5 * x**2
            + 0.5 * kappa_mean * (x - xbar) ** 2
            + 0.5 * a**2
            + huber * (np.sqrt(1.0 + a**2) - 1.0)
        )

    def g(X, mu):
        return 0.5 * X[:, 0] ** 2

    def grad_x_f(t, X, A, eta):
        xbar = eta.mean()[0]
        return X + kappa_mean * (X - xbar)

    def grad_a_f(t, X, A, eta):
        return A + huber * A / np.sqrt(1.0 + A**2)

    def grad_x_g(X, mu):
        return X.copy()

    def grad_mu_f(t, x, a, eta):
        val = -kappa_mean * (x[0] - eta.mean()[0])

        def kernel(Xq, Aq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def grad_nu_f(t, x, a, eta):
        def kernel(Xq, Aq):
            return np.zeros((np.atleast_2d(Xq).shape[0], 1))

        return kernel

    def grad_mu_g(x, mu):
        def kernel(Xq):
            return np.zeros((np.atleast_2d(Xq).shape[0], 1))

        return kernel

    def avg_grad_mu_f(t, X, A, eta, Xq, Aq):
        val = -kappa_mean * (X[:, 0].mean() - eta.mean()[0])
        return np.full((Xq.shape[0], 1), val)

    def avg_grad_nu_f(t, X, A, eta, Xq, Aq):
        return np.zeros((Xq.shape[0], 1))

    def avg_grad_mu_g(mu, Xq):
        return np.zeros((np.atleast_2d(Xq).shape[0], 1))

    cost = CostModel(
        f=f, g=g,
        grad_x_f=grad_x_f, grad_a_f=grad_a_f, grad_x_g=grad_x_g,
        grad_mu_f=grad_mu_f, grad_nu_f=grad_nu_f, grad_mu_g=grad_mu_g,
        lambda1=0.5, lambda2=0.0,
        avg_grad_mu_f=avg_grad_mu_f, avg_grad_nu_f=avg_grad_nu_f,
        avg_grad_mu_g=avg_grad_mu_g,
    )
    return ProblemSpec(
        dynamics=dyn,
        cost=cost,
        action=action or ActionSet("full"),
        initial_law=initial_law if initial_law is not None else GaussianLaw([0.3], [0.4]),
        kind="example1",
        name="example1",
    )


# ---------------------------------------------------------------------------
# example2: no control-drift term, separable cost, deterministic optimum


def make_example2(
    horizon: float = 1.0,
    kappa_mean: float = 0.5,
    kappa_nu: float = 0.5,
    gamma: float = 0.8,
    action: ActionSet = None,
    initial_law=None,
) -> ProblemSpec:
    dyn = LinearDynamics(
        n=1, k=1, d=1, horizon=horizon,
        b1=np.array([[-0.5]]),
        beta_a=np.array([[gamma]]),
        sigma0=np.array([[1.0]]),
    )

    def f(t, X, A, eta):
        x = X[:, 0]
        a = A[:, 0]
        em = eta.mean()
        return (
            0.5 * x**2
            + 0.5 * kappa_mean * (x - em[0]) ** 2
            + 0.5 * a**2
            + 0.5 * kappa_nu * (a - em[1]) ** 2
        )

    def g(X, mu):
        return 0.5 * X[:, 0] ** 2

    def grad_x_f(t, X, A, eta):
        return X + kappa_mean * (X - eta.mean()[0])

    def grad_a_f(t, X, A, eta):
        return A + kappa_nu * (A - eta.mean()[1])

    def grad_x_g(X, mu):
        return X.copy()

    def grad_mu_f(t, x, a, eta):
        val = -kappa_mean * (x[0] - eta.mean()[0])

        def kernel(Xq, Aq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def grad_nu_f(t, x, a, eta):
        val = -kappa_nu * (a[0] - eta.mean()[1])

        def kernel(Xq, Aq):
            return np.full((np.atleast_2d(Xq).shape[0], 1), val)

        return kernel

    def grad_mu_g(x, mu):
        def kernel(Xq):
            return np.zeros((np.atleast_2d(Xq).shape[0], 1))

        return kernel

    def avg_grad_mu_f(t, X, A, eta, Xq, Aq):
        val = -kappa_mean * (X[:, 0].mean() - eta.mean()[0])
        return np.full((Xq.shape[0], 1), val)

    def avg_grad_nu_f(t, X, A, eta, Xq, Aq):
        val = -kappa_nu * (A[:, 0].mean() - eta.mean()[1])
        return np.full((Xq.shape[0], 1), val)

    def avg_grad_mu_g(mu, Xq):
        return np.zeros((np.atleast_2d(Xq).shape[0], 1))

    cost = CostModel(
        f=f, g=g,
        grad_x_f=grad_x_f, grad_a_f=grad_a_f, grad_x_g=grad_x_g,
        grad_mu_f=grad_mu_f, grad_nu_f=grad_nu_f, grad_mu_g=grad_mu_g,
        lambda1=0.5, lambda2=0.0,
        avg_grad_mu_f=avg_grad_mu_f, avg_grad_nu_f=avg_grad_nu_f,
        avg_grad_mu_g=avg_grad_mu_g,
    )
    return ProblemSpec(
        dynamics=dyn,
        cost=cost,
        action=action or ActionSet("full"),
        initial_law=initial_law if initial_law is not None else GaussianLaw([0.5], [0.3]),
        kind="example2",
        name="example2",
    )


BUILTIN_NAMES = ("lq1d", "example1", "example2")


def get_problem(name: str, **kwargs) -> ProblemSpec:
    if name == "lq1d":
        return make_lq1d(**kwargs)
    if name == "example1":
        return make_example1(**kwargs)
    if name == "example2":
        return make_example2(**kwargs)
    raise ConfigurationError(f"unknown built-in problem {name!r}")
