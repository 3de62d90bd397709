import numpy as np
import pytest

from mfclab.model import ActionSet, CostModel, DiracLaw, LinearDynamics, ProblemSpec


def zero_cost_model():
    """Cost model that is identically zero (for pure-dynamics tests)."""
    def zeros_like_rows(X):
        return np.zeros(np.atleast_2d(X).shape[0])

    def kernel_factory(cols):
        def factory(*args):
            def kernel(Xq, Aq=None):
                return np.zeros((np.atleast_2d(Xq).shape[0], cols))
            return kernel
        return factory

    return CostModel(
        f=lambda t, X, A, eta: zeros_like_rows(X),
        g=lambda X, mu: zeros_like_rows(X),
        grad_x_f=lambda t, X, A, eta: np.zeros_like(np.atleast_2d(X)),
        grad_a_f=lambda t, X, A, eta: np.zeros_like(np.atleast_2d(A)),
        grad_x_g=lambda X, mu: np.zeros_like(np.atleast_2d(X)),
        grad_mu_f=kernel_factory(1),
        grad_nu_f=kernel_factory(1),
        grad_mu_g=kernel_factory(1),
        lambda1=0.0,
        lambda2=0.0,
    )


@pytest.fixture
def zero_spec():
    """All-zero dynamics and costs in one dimension."""
    dyn = LinearDynamics(n=1, k=1, d=1, horizon=1.0)
    return ProblemSpec(
        dynamics=dyn, cost=zero_cost_model(), action=ActionSet("full"),
        initial_law=DiracLaw([0.0]), kind="custom",
    )
