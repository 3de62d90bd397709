"""Feedback maps sending (t, state, adjoint, joint law) into the action set.

Three constructions are provided:

* closed-form map for the scalar LQ family (quadratic control costs with
  control-mean coupling),
* minimizer of a modified reduced Hamiltonian for costs that see the
  control law only through the state marginal (strongly convex in the
  control, solved by projected gradient descent),
* deterministic minimizer of the cloud-averaged reduced Hamiltonian for
  separable costs with no direct control-drift term.

Plus the pushforward of a (state, adjoint) cloud through a map and a
first-order optimality residual diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConvergenceError, InvariantViolationError
from .model import ActionSet, EmpiricalMeasure, ProblemSpec, as_time_fn

__all__ = [
    "LQCoefficients",
    "lq_psi_zeta",
    "lq_feedback",
    "FeedbackMap",
    "LQClosedFormMap",
    "ModifiedHamiltonianMap",
    "ExpectedHamiltonianMap",
    "make_feedback_map",
    "pushforward_phi",
    "optimality_residual",
    "stationarity_field",
]


@dataclass
class LQCoefficients:
    """Scalar coefficient functions of the 1-D LQ family.

    Running cost  ½ [ qx x² + qbarx (x − rx x̄)² + q a² + qbar (a − r ā)²
    + 2 c x a ],  terminal cost ½ [ gx x² + gmean x̄² ],  drift
    b0 + b1 x + b2 a + beta x̄ + gamma ā,  diffusion sigma0 + sigma1 x +
    sigma2 x̄.  Requires q >= lambda > 0 and qbar >= 0 pointwise.
    """

    q: object = 1.0
    qbar: object = 0.0
    r: object = 0.0
    c: object = 0.0
    b2: object = 1.0
    gamma: object = 0.0
    beta: object = 0.0
    b1: object = 0.0
    b0: object = 0.0
    sigma0: object = 1.0
    sigma1: object = 0.0
    sigma2: object = 0.0
    qx: object = 0.0
    qbarx: object = 0.0
    rx: object = 0.0
    gx: float = 0.0
    gmean: float = 0.0

    def __post_init__(self):
        for name in (
            "q", "qbar", "r", "c", "b2", "gamma", "beta", "b1", "b0",
            "sigma0", "sigma1", "sigma2", "qx", "qbarx", "rx",
        ):
            fn = as_time_fn(getattr(self, name))
            setattr(self, name, lambda t, _f=fn: float(np.asarray(_f(t)).reshape(())))
        self.gx = float(self.gx)
        self.gmean = float(self.gmean)

    def scan(self, horizon, points=1000):
        """Grid minima/maxima used by the invariant checks."""
        ts = np.linspace(0.0, horizon, points)
        qv = np.array([self.q(t) for t in ts])
        qbv = np.array([self.qbar(t) for t in ts])
        return float(qv.min()), float(qbv.min())

    def check_invariants(self, horizon):
        qmin, qbarmin = self.scan(horizon)
        if qmin <= 0:
            raise InvariantViolationError(f"q must be strictly positive (min {qmin})")
        if qbarmin < 0:
            raise InvariantViolationError(f"qbar must be nonnegative (min {qbarmin})")


def lq_psi_zeta(coeffs: LQCoefficients, t: float):
    """Mean-coupling gains of the closed-form LQ feedback at time t."""
    q, qbar, r = coeffs.q(t), coeffs.qbar(t), coeffs.r(t)
    den = q + qbar * (r - 1.0) ** 2
    if den <= 0:
        raise InvariantViolationError(f"q + qbar (r-1)^2 must be positive, got {den}")
    factor = qbar * r * (r - 2.0) / den
    return coeffs.c(t) * factor, (coeffs.b2(t) + coeffs.gamma(t)) * factor


def lq_feedback(coeffs: LQCoefficients, t, x, y, mean_x, mean_y):
    """Closed-form LQ control; x / y may be scalars or arrays."""
    q, qbar = coeffs.q(t), coeffs.qbar(t)
    den = q + qbar
    if den <= 0:
        raise InvariantViolationError(f"q + qbar must be positive, got {den}")
    psi, zeta = lq_psi_zeta(coeffs, t)
    return (
        -coeffs.c(t) * np.asarray(x)
        - coeffs.b2(t) * np.asarray(y)
        + psi * mean_x
        + (-coeffs.gamma(t) + zeta) * mean_y
    ) / den


# ---------------------------------------------------------------------------
# inner projected gradient descent (strongly convex objectives)


def _projected_minimize(action: ActionSet, value_fn, grad_fn, a0, tol, max_iters):
    """Vectorized PGD with backtracking; stops on the tangent-residual norm.

    grad_fn(a) -> (M,k) for independent row problems.  The backtracking
    merit is the stationarity residual itself (worst tangent-projected
    gradient norm): for smooth strongly convex rows it contracts under
    sufficiently small steps and, unlike objective decrease, it stays
    resolvable in floating point arbitrarily close to the minimizer.
    value_fn is consulted only to reject non-finite excursions.
    """
    a = action.project(np.array(a0, dtype=np.float64))
    step = 1.0
    g = grad_fn(a)
    resid = float(np.max(np.linalg.norm(action.tangent_step(a, g), axis=-1)))
    for it in range(max_iters):
        if resid <= tol:
            return a, resid, it
        accepted = False
        for _ in range(60):
            trial = action.project(a - step * g)
            tg = grad_fn(trial)
            tresid = float(np.max(np.linalg.norm(action.tangent_step(trial, tg), axis=-1)))
            if tresid <= max((1.0 - 1e-4) * resid, tol) and np.all(
                np.isfinite(value_fn(trial))
            ):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        a, g, resid = trial, tg, tresid
        step *= 1.2
    if resid > tol:
        raise ConvergenceError(
            f"inner minimizer stalled at residual {resid:.3e} (tol {tol:.1e})",
            residual=resid,
        )
    return a, resid, max_iters


# ---------------------------------------------------------------------------
# feedback maps


class FeedbackMap:
    """Base class; evaluate() is vectorized over a particle cloud.

    a0 optionally seeds the inner minimization (iterative maps only);
    the minimizer is unique by strong convexity, so the seed affects
    runtime, not the result beyond the inner tolerance.
    """

    kind = "abstract"

    def evaluate(self, t, X, Y, chi: EmpiricalMeasure, a0=None) -> np.ndarray:
        raise NotImplementedError

    def cloud(self, t, X, Y) -> np.ndarray:
        """Evaluate with chi taken as the joint cloud of (X, Y)."""
        return self.evaluate(t, X, Y, EmpiricalMeasure.joint(X, Y))


class LQClosedFormMap(FeedbackMap):
    kind = "lq-closed-form"

    def __init__(self, spec: ProblemSpec):
        if spec.lq is None:
            raise ConfigurationError("LQ closed form needs attached LQ coefficients")
        self.spec = spec
        self.coeffs = spec.lq

    def evaluate(self, t, X, Y, chi, a0=None):
        mean = chi.mean()
        alpha = lq_feedback(self.coeffs, t, X[:, 0], Y[:, 0], mean[0], mean[1])
        return self.spec.action.project(alpha[:, None])


class ModifiedHamiltonianMap(FeedbackMap):
    """Per-particle argmin of the modified reduced Hamiltonian.

    Valid when the running cost depends on the joint law only through its
    state marginal and is strongly convex in the control (modulus
    lambda1 > 0).  The objective per particle is
    <b2ᵀ y + baᵀ ρ̄, a> + f(t, x, a, mu ⊗ δ0) with mu the state marginal
    of chi and ρ̄ the mean of its adjoint marginal.
    """

    kind = "modified-hamiltonian"

    def __init__(self, spec: ProblemSpec, tol_inner: float = 1e-10, max_iters: int = 500):
        if spec.cost.lambda1 <= 0:
            raise ConfigurationError("modified-Hamiltonian map needs lambda1 > 0")
        self.spec = spec
        self.tol_inner = tol_inner
        self.max_iters = max_iters

    def evaluate(self, t, X, Y, chi, a0=None):
        spec = self.spec
        n = spec.n
        mu_pts = chi.points[:, :n]
        rho_bar = chi.points[:, n:].mean(axis=0)
        eta_tilde = EmpiricalMeasure(
            np.column_stack([mu_pts, np.zeros((mu_pts.shape[0], spec.k))])
        )
        lin = Y @ spec.dynamics.b2(t) + spec.dynamics.beta_a(t).T @ rho_bar

        def value_fn(a):
            return np.sum(lin * a, axis=1) + spec.cost.f(t, X, a, eta_tilde)

        def grad_fn(a):
            return lin + spec.cost.grad_a_f(t, X, a, eta_tilde)

        start = a0 if a0 is not None else np.zeros((X.shape[0], spec.k))
        a, _, _ = _projected_minimize(
            spec.action, value_fn, grad_fn, start, self.tol_inner, self.max_iters
        )
        return a


class ExpectedHamiltonianMap(FeedbackMap):
    """Deterministic control minimizing the cloud-averaged reduced Hamiltonian.

    Valid when b2 vanishes and the running cost splits into state and
    control parts.  The output is independent of the (x, y) arguments;
    every particle receives the same action.
    """

    kind = "expected-hamiltonian"

    def __init__(self, spec: ProblemSpec, tol_inner: float = 1e-10, max_iters: int = 500):
        if spec.cost.lambda1 + spec.cost.lambda2 <= 0:
            raise ConfigurationError("expected-Hamiltonian map needs lambda1 + lambda2 > 0")
        self.spec = spec
        self.tol_inner = tol_inner
        self.max_iters = max_iters

    def evaluate(self, t, X, Y, chi, a0=None):
        spec = self.spec
        n = spec.n
        pts = chi.points
        m = pts.shape[0]
        Xc = pts[:, :n]
        Yc = pts[:, n:]
        ybar = Yc.mean(axis=0)
        ba_t = spec.dynamics.beta_a(t)

        def cloud_with(a_row):
            a_all = np.tile(a_row, (m, 1))
            return a_all, EmpiricalMeasure.joint(Xc, a_all)

        def value_fn(a):
            a_all, eta = cloud_with(a[0])
            drift = spec.dynamics.drift(t, Xc, a_all, Xc.mean(axis=0), a[0])
            return np.array([np.mean(np.sum(drift * Yc, axis=1))
                             + np.mean(spec.cost.f(t, Xc, a_all, eta))])

        def grad_fn(a):
            a_all, eta = cloud_with(a[0])
            direct = np.mean(spec.cost.grad_a_f(t, Xc, a_all, eta), axis=0)
            nu_avg = np.mean(
                spec.cost.avg_grad_nu_f(t, Xc, a_all, eta, Xc, a_all), axis=0
            )
            return (direct + ba_t.T @ ybar + nu_avg)[None, :]

        start = a0[:1] if a0 is not None else np.zeros((1, spec.k))
        a, _, _ = _projected_minimize(
            spec.action, value_fn, grad_fn, start, self.tol_inner, self.max_iters
        )
        return np.tile(a[0], (X.shape[0], 1))


def make_feedback_map(spec: ProblemSpec, tol_inner: float = 1e-10) -> FeedbackMap:
    if spec.kind == "lq1d":
        return LQClosedFormMap(spec)
    if spec.kind == "example1":
        return ModifiedHamiltonianMap(spec, tol_inner)
    if spec.kind == "example2":
        return ExpectedHamiltonianMap(spec, tol_inner)
    raise ConfigurationError(
        f"no feedback construction for problem kind {spec.kind!r}"
    )


def pushforward_phi(fmap: FeedbackMap, t, chi: EmpiricalMeasure, n: int) -> EmpiricalMeasure:
    """Joint (x, a)-cloud obtained by applying the map to each (x, y) atom."""
    X = chi.points[:, :n]
    Y = chi.points[:, n:]
    alpha = fmap.evaluate(t, X, Y, chi)
    return EmpiricalMeasure.joint(X, alpha)


def stationarity_field(spec: ProblemSpec, t, X, Y, alpha) -> np.ndarray:
    """Control-gradient of the reduced Hamiltonian plus its averaged law term.

    s_m = b2ᵀ y_m + baᵀ ȳ + ∂a f(t, x_m, a_m, η) + avg_j ∂ν f(θ_j)(x_m, a_m)
    with η the pushforward cloud of (X, alpha).  Vanishing of the tangent
    projection of -s certifies the variational inequality.
    """
    eta = EmpiricalMeasure.joint(X, alpha)
    dyn = spec.dynamics
    s = (
        Y @ dyn.b2(t)
        + dyn.beta_a(t).T @ Y.mean(axis=0)
        + spec.cost.grad_a_f(t, X, alpha, eta)
        + spec.cost.avg_grad_nu_f(t, X, alpha, eta, X, alpha)
    )
    return s


def optimality_residual(spec: ProblemSpec, fmap: FeedbackMap, t, X, Y) -> float:
    """Cloud-averaged violation of the first-order variational inequality.

    Per particle the violation is the norm of the tangent-cone projection
    of minus the stationarity vector, which equals the supremum of
    <s, α − a> over unit feasible directions a clipped below at zero; for
    an unconstrained action set it is just |s|.
    """
    chi = EmpiricalMeasure.joint(X, Y)
    alpha = fmap.evaluate(t, X, Y, chi)
    s = stationarity_field(spec, t, X, Y, alpha)
    resid = np.linalg.norm(spec.action.tangent_step(alpha, s), axis=-1)
    return float(np.mean(resid))
