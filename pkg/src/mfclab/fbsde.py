"""Coupled forward-backward solver and the scalar LQ Riccati oracle.

The forward component is the particle system driven through a feedback
map evaluated on a regression-based decoupling field (Y as a function of
the current state).  The backward component fits the field by
least-squares Monte Carlo: conditional expectations of the one-step
backward target on a polynomial basis of the state.  A damped Picard
loop alternates the two until the field stops moving.

The Riccati oracle integrates the ordinary differential equations
obtained by matching an affine representation Y = P(t) X + p(t) E[X] +
s(t) in the adjoint system of the LQ family; it was derived by hand
before this module was written and is validated against the Picard
solver, so neither component is trusted alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from ._backend import kernels
from .errors import ConfigurationError, ConvergenceError, RegressionError
from .feedback import FeedbackMap, LQCoefficients, lq_feedback, make_feedback_map, optimality_residual
from .model import EmpiricalMeasure, Partition, ProblemSpec, terminal_adjoint
from .sim import BrownianStore, draw_initial

__all__ = [
    "DecouplingField",
    "FBSDESolution",
    "RiccatiSolution",
    "FeedbackFlow",
    "RiccatiFlow",
    "mvfbsde_driver",
    "picard_solve",
    "riccati_oracle_lq1d",
    "fbsde_residual_check",
    "regression_slope_diagnostics",
    "monotonicity_probe",
]


# ---------------------------------------------------------------------------
# regression machinery


def basis_matrix(kind: str, X: np.ndarray) -> np.ndarray:
    if kind == "affine":
        return np.column_stack([np.ones(X.shape[0]), X])
    if kind == "quadratic":
        return np.column_stack([np.ones(X.shape[0]), X, X**2])
    raise ConfigurationError(f"unknown regression basis {kind!r}")


def basis_size(kind: str, n: int) -> int:
    return 1 + n if kind == "affine" else 1 + 2 * n


def _regress(phi: np.ndarray, targets: np.ndarray):
    """Least squares with structural-degeneracy handling.

    Columns with (numerically) zero variance are dropped and their
    coefficients set to zero: a deterministic initial state makes the
    state columns collinear with the intercept, which is a property of
    the problem, not a user error.  A genuinely under-determined system
    (fewer samples than twice the retained basis size) raises.
    """
    m, b = phi.shape
    keep = [0]
    for j in range(1, b):
        col = phi[:, j]
        if np.std(col) > 1e-12 * (1.0 + np.abs(col).max()):
            keep.append(j)
    if m < 2 * len(keep):
        raise RegressionError(
            f"regression basis too rich: {len(keep)} columns for {m} samples"
        )
    sub = phi[:, keep]
    coeffs_sub, _, rank, _ = np.linalg.lstsq(sub, targets, rcond=None)
    if rank < len(keep):
        raise RegressionError("regression matrix is rank deficient")
    coeffs = np.zeros((b,) + targets.shape[1:])
    coeffs[keep] = coeffs_sub
    return coeffs


@dataclass
class DecouplingField:
    """Per-time regression coefficients expressing Y ~ basis(x) @ coeffs."""

    times: np.ndarray          # (N+1,)
    basis: str                 # affine | quadratic
    coeffs: np.ndarray         # (N+1, B, n)
    mean_x: np.ndarray = None  # (N+1, n) recorded cloud means
    mean_y: np.ndarray = None  # (N+1, n)
    mean_z: np.ndarray = None  # (N+1, n, d)

    @classmethod
    def zeros(cls, times, basis: str, n: int, d: int) -> "DecouplingField":
        nt = len(times)
        return cls(
            times=np.asarray(times, dtype=np.float64),
            basis=basis,
            coeffs=np.zeros((nt, basis_size(basis, n), n)),
            mean_x=np.zeros((nt, n)),
            mean_y=np.zeros((nt, n)),
            mean_z=np.zeros((nt, n, d)),
        )

    def evaluate(self, i: int, X: np.ndarray) -> np.ndarray:
        return basis_matrix(self.basis, X) @ self.coeffs[i]

    def time_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, self.times[-1]):
            raise ConfigurationError(f"time {t} is not a knot of the decoupling field")
        return i

    def to_json(self):
        return {
            "basis": self.basis,
            "times": self.times.tolist(),
            "coeffs": self.coeffs.tolist(),
            "mean_x": self.mean_x.tolist() if self.mean_x is not None else None,
            "mean_y": self.mean_y.tolist() if self.mean_y is not None else None,
        }


# ---------------------------------------------------------------------------
# solution containers and feedback flows


@dataclass
class FBSDESolution:
    partition: Partition
    states: np.ndarray        # (N+1, M, n)
    adjoints: np.ndarray      # (N+1, M, n)
    zs: np.ndarray            # (N, M, n, d)
    controls: np.ndarray      # (N+1, M, k)
    field: DecouplingField
    increments: np.ndarray    # (N, M, d) noise used in the forward pass
    iterations: int
    residual: float           # final sup-in-time L2 change of Y
    residual_history: list
    optimality_residual: float

    @property
    def n_particles(self):
        return self.states.shape[1]

    def summary(self):
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "residual_history": [float(r) for r in self.residual_history],
            "optimality_residual": self.optimality_residual,
            "field": self.field.to_json(),
        }


class FeedbackFlow:
    """Control source for simulate_fine: feedback map along a decoupling field."""

    def __init__(self, spec: ProblemSpec, fmap: FeedbackMap, field: DecouplingField):
        self.spec = spec
        self.fmap = fmap
        self.field = field

    def controls_at(self, t, X):
        i = self.field.time_index(t)
        Y = self.field.evaluate(i, X)
        return self.fmap.evaluate(t, X, Y, EmpiricalMeasure.joint(X, Y))


class RiccatiFlow:
    """Control source evaluating the LQ feedback through a Riccati solution."""

    def __init__(self, spec: ProblemSpec, riccati: "RiccatiSolution"):
        if spec.lq is None:
            raise ConfigurationError("RiccatiFlow needs an LQ problem")
        self.spec = spec
        self.riccati = riccati

    def controls_at(self, t, X):
        x = X[:, 0]
        xbar = float(x.mean())
        y = self.riccati.adjoint(t, x, xbar)
        ybar = self.riccati.adjoint(t, xbar, xbar)
        alpha = lq_feedback(self.spec.lq, t, x, y, xbar, ybar)
        return alpha[:, None]


# ---------------------------------------------------------------------------
# the backward driver


def mvfbsde_driver(spec: ProblemSpec, t, X, Y, Z, alpha) -> np.ndarray:
    """Backward driver: state-gradient of the Hamiltonian plus the
    cloud-averaged measure-gradient terms, along the pushforward law."""
    dyn = spec.dynamics
    eta = EmpiricalMeasure.joint(X, alpha)
    out = Y @ dyn.b1(t)
    if Z is not None:
        out = out + np.einsum("pdj,mpd->mj", dyn.sigma1(t), Z)
        out = out + np.einsum("pdj,pd->j", dyn.sigma2(t), Z.mean(axis=0))
    out = out + spec.cost.grad_x_f(t, X, alpha, eta)
    out = out + dyn.beta_x(t).T @ Y.mean(axis=0)
    out = out + spec.cost.avg_grad_mu_f(t, X, alpha, eta, X, alpha)
    return out


# ---------------------------------------------------------------------------
# Picard iteration


def picard_solve(
    spec: ProblemSpec,
    partition: Partition,
    store: BrownianStore,
    damping: float = 0.5,
    tol: float = 1e-7,
    max_iters: int = 200,
    basis: str = "affine",
    tol_inner: float = 1e-10,
    feedback_map: Optional[FeedbackMap] = None,
) -> FBSDESolution:
    """Damped Picard iteration on the decoupling field.

    Each sweep simulates the forward states with the current field,
    rebuilds the terminal condition, runs one backward least-squares
    pass (one damped inner sweep resolves the implicit Y in the driver),
    and blends the refit field into the old one with weight `damping`.
    Stops when the sup-over-time particle-L2 change of Y drops below
    `tol`; raises ConvergenceError (with the residual history) at the
    iteration cap.
    """
    if not 0.0 < damping <= 1.0:
        raise ConfigurationError("damping must lie in (0, 1]")
    fmap = feedback_map or make_feedback_map(spec, tol_inner)
    n, k, d = spec.n, spec.k, spec.d
    m = store.n_particles
    grid = partition.grid
    hs = partition.steps
    n_steps = partition.n_steps
    dW = store.increments(partition)
    x0 = draw_initial(spec, store)
    tab = spec.dynamics.tabulate(grid[:-1])
    need_z = tab.has_state_diffusion

    field = DecouplingField.zeros(grid, basis, n, d)
    history = []
    converged = False
    states = ys = zs = alphas = None
    iterations = 0

    for it in range(max_iters):
        iterations = it + 1
        states, ys, alphas = _forward_pass(spec, fmap, field, x0, tab, dW, grid, hs)
        new_coeffs, y_fit, zs = _backward_pass(
            spec, fmap, field, states, dW, grid, hs, need_z
        )
        # residual: change of the field on the current states, sup over times
        delta = 0.0
        for i in range(n_steps + 1):
            old_y = field.evaluate(i, states[i])
            diff = y_fit[i] - old_y
            delta = max(delta, float(np.sqrt(np.mean(np.sum(diff**2, axis=1)))))
        history.append(delta)
        field.coeffs = damping * new_coeffs + (1.0 - damping) * field.coeffs
        if delta <= tol:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"Picard iteration did not reach tol {tol:.1e} in {max_iters} sweeps "
            f"(last change {history[-1]:.3e})",
            residual=history[-1],
            history=history,
        )

    # consistency pass with the final field
    states, ys, alphas = _forward_pass(spec, fmap, field, x0, tab, dW, grid, hs)
    _, _, zs = _backward_pass(spec, fmap, field, states, dW, grid, hs, True)
    field.mean_x = states.mean(axis=1)
    field.mean_y = ys.mean(axis=1)
    field.mean_z = np.concatenate([zs.mean(axis=1), zs[-1:].mean(axis=1)], axis=0)

    opt_res = 0.0
    for i in range(n_steps + 1):
        opt_res = max(
            opt_res, optimality_residual(spec, fmap, float(grid[i]), states[i], ys[i])
        )

    return FBSDESolution(
        partition=partition,
        states=states,
        adjoints=ys,
        zs=zs,
        controls=alphas,
        field=field,
        increments=dW,
        iterations=iterations,
        residual=history[-1],
        residual_history=history,
        optimality_residual=float(opt_res),
    )


def _forward_pass(spec, fmap, field, x0, tab, dW, grid, hs):
    n_steps = len(hs)
    m = x0.shape[0]
    states = np.empty((n_steps + 1, m, spec.n))
    ys = np.empty((n_steps + 1, m, spec.n))
    alphas = np.empty((n_steps + 1, m, spec.k))
    states[0] = x0
    x = x0
    a = None
    for i in range(n_steps):
        y = field.evaluate(i, x)
        a = fmap.evaluate(float(grid[i]), x, y, EmpiricalMeasure.joint(x, y), a0=a)
        ys[i] = y
        alphas[i] = a
        x = kernels.em_single_step(x, a, *tab.slice(i), dW[i], hs[i])
        states[i + 1] = x
    ys[n_steps] = field.evaluate(n_steps, x)
    alphas[n_steps] = fmap.evaluate(
        float(grid[n_steps]), x, ys[n_steps], EmpiricalMeasure.joint(x, ys[n_steps]), a0=a
    )
    return states, ys, alphas


def _backward_pass(spec, fmap, field, states, dW, grid, hs, with_z):
    n_steps = len(hs)
    m = states.shape[1]
    n, d = spec.n, spec.d
    new_coeffs = np.zeros_like(field.coeffs)
    y_fit = np.empty((n_steps + 1, m, n))
    zs = np.zeros((n_steps, m, n, d))

    xT = states[n_steps]
    phi_T = basis_matrix(field.basis, xT)
    target_T = terminal_adjoint(spec, xT, EmpiricalMeasure(xT))
    new_coeffs[n_steps] = _regress(phi_T, target_T)
    y_fit[n_steps] = phi_T @ new_coeffs[n_steps]

    y_next = y_fit[n_steps]
    for i in range(n_steps - 1, -1, -1):
        xi = states[i]
        phi = basis_matrix(field.basis, xi)
        t = float(grid[i])
        if with_z:
            ztarget = (y_next[:, :, None] * dW[i][:, None, :]).reshape(m, n * d) / hs[i]
            zc = _regress(phi, ztarget)
            zs[i] = (phi @ zc).reshape(m, n, d)
        z_i = zs[i] if with_z else None
        # predictor, then one damped sweep (two driver evaluations)
        coeffs_i = _regress(phi, y_next)
        y_hat = phi @ coeffs_i
        a = None
        for _ in range(2):
            a = fmap.evaluate(t, xi, y_hat, EmpiricalMeasure.joint(xi, y_hat), a0=a)
            drv = mvfbsde_driver(spec, t, xi, y_hat, z_i, a)
            coeffs_i = _regress(phi, y_next + hs[i] * drv)
            y_hat = phi @ coeffs_i
        new_coeffs[i] = coeffs_i
        y_fit[i] = y_hat
        y_next = y_hat
    return new_coeffs, y_fit, zs


# ---------------------------------------------------------------------------
# Riccati oracle for the scalar LQ family


@dataclass
class RiccatiSolution:
    """Affine adjoint representation Y = P x + p x̄ + s plus the exact value.

    P solves the state Riccati equation, P + p the mean system's one, and
    s the drift offset; the value integrates the running cost through the
    first two moments of the optimal flow.
    """

    times: np.ndarray
    P: np.ndarray
    p: np.ndarray
    s: np.ndarray
    value: float
    mean_path: np.ndarray
    var_path: np.ndarray
    ode_residual: float

    def P_at(self, t):
        return np.interp(t, self.times, self.P)

    def p_at(self, t):
        return np.interp(t, self.times, self.p)

    def s_at(self, t):
        return np.interp(t, self.times, self.s)

    def adjoint(self, t, x, xbar):
        return self.P_at(t) * x + self.p_at(t) * xbar + self.s_at(t)


def riccati_oracle_lq1d(
    coeffs: LQCoefficients,
    horizon: float,
    mean0: float,
    var0: float,
    ode_steps: int = 20000,
) -> RiccatiSolution:
    """Independent value/adjoint oracle for the scalar LQ family.

    Integrates, with a classical 4-stage one-step method on a dense grid,
    the backward system for (P, Pi = P + p, s):

      P'  = -2 b1 P - sigma1^2 P - qx - qbarx + (c + b2 P)^2 / (q + qbar)
      Pi' = -2 (b1+beta) Pi - (sigma1+sigma2)^2 P - (qx + qbarx (1-rx)^2)
            + ((b2+gamma) Pi + c)^2 / (q + qbar (1-r)^2)
      s'  = -b0 Pi - (b1+beta) s
            + ((b2+gamma) Pi + c) (b2+gamma) s / (q + qbar (1-r)^2)
            - (sigma1+sigma2) P sigma0

    with P(T) = gx, Pi(T) = gx + gmean, s(T) = 0, then pushes the mean m
    and variance v of the optimal flow forward together with the running
    cost, using E[f] expressed through (m, v, mean control, control slope).
    Nonconvex inputs can blow the quadratic term up; that surfaces as a
    ConvergenceError.
    """
    if ode_steps < 1000:
        raise ConfigurationError("ode_steps too small for the oracle tolerance")
    coeffs.check_invariants(horizon)
    cf = coeffs
    n_half = 2 * ode_steps
    times = np.linspace(0.0, horizon, n_half + 1)
    dt = horizon / n_half

    def rhs(t, state):
        P, Pi, s = state
        q, qbar, r = cf.q(t), cf.qbar(t), cf.r(t)
        qx, qbarx, rx = cf.qx(t), cf.qbarx(t), cf.rx(t)
        c, b1, b2 = cf.c(t), cf.b1(t), cf.b2(t)
        beta, gamma, b0 = cf.beta(t), cf.gamma(t), cf.b0(t)
        s1, s2, s0 = cf.sigma1(t), cf.sigma2(t), cf.sigma0(t)
        den = q + qbar
        den_bar = q + qbar * (r - 1.0) ** 2
        dP = -2.0 * b1 * P - s1**2 * P - qx - qbarx + (c + b2 * P) ** 2 / den
        dPi = (
            -2.0 * (b1 + beta) * Pi
            - (s1 + s2) ** 2 * P
            - (qx + qbarx * (1.0 - rx) ** 2)
            + ((b2 + gamma) * Pi + c) ** 2 / den_bar
        )
        ds = (
            -b0 * Pi
            - (b1 + beta) * s
            + ((b2 + gamma) * Pi + c) * (b2 + gamma) * s / den_bar
            - (s1 + s2) * P * s0
        )
        return np.array([dP, dPi, ds])

    back = np.empty((n_half + 1, 3))
    back[n_half] = [cf.gx, cf.gx + cf.gmean, 0.0]
    state = back[n_half].copy()
    for i in range(n_half, 0, -1):
        t = times[i]
        hstep = -dt
        k1 = rhs(t, state)
        k2 = rhs(t + hstep / 2, state + hstep / 2 * k1)
        k3 = rhs(t + hstep / 2, state + hstep / 2 * k2)
        k4 = rhs(t + hstep, state + hstep * k3)
        state = state + hstep / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > 1e10:
            raise ConvergenceError(
                f"Riccati integration escaped at t={t - dt:.4f}", residual=float(np.max(np.abs(state)))
            )
        back[i - 1] = state

    P_dense = back[:, 0]
    Pi_dense = back[:, 1]
    s_dense = back[:, 2]

    # residual of the backward system on the dense grid
    dstate = np.gradient(back, dt, axis=0, edge_order=2)
    rhs_vals = np.stack([rhs(times[i], back[i]) for i in range(0, n_half + 1, 8)])
    resid = float(np.max(np.abs(dstate[::8] - rhs_vals)))

    # forward pass for (mean, variance, accumulated running cost)
    def fwd_rhs(idx_t, t, state):
        mval, vval, _ = state
        P = P_dense[idx_t]
        Pi = Pi_dense[idx_t]
        sv = s_dense[idx_t]
        q, qbar, r = cf.q(t), cf.qbar(t), cf.r(t)
        qx, qbarx, rx = cf.qx(t), cf.qbarx(t), cf.rx(t)
        c, b1, b2 = cf.c(t), cf.b1(t), cf.b2(t)
        beta, gamma, b0 = cf.beta(t), cf.gamma(t), cf.b0(t)
        s1, s2, s0 = cf.sigma1(t), cf.sigma2(t), cf.sigma0(t)
        den = q + qbar
        den_bar = q + qbar * (r - 1.0) ** 2
        abar = (-(b2 + gamma) * (Pi * mval + sv) - c * mval) / den_bar
        slope = -(c + b2 * P) / den
        dm = b0 + (b1 + beta) * mval + (b2 + gamma) * abar
        dv = 2.0 * (b1 + b2 * slope) * vval + s1**2 * vval + (s0 + (s1 + s2) * mval) ** 2
        ef = 0.5 * (
            (qx + qbarx) * vval
            + (qx + qbarx * (1.0 - rx) ** 2) * mval**2
            + den_bar * abar**2
            + den * slope**2 * vval
            + 2.0 * c * mval * abar
            + 2.0 * c * slope * vval
        )
        return np.array([dm, dv, ef])

    fstate = np.array([mean0, var0, 0.0])
    means = np.empty(ode_steps + 1)
    vars_ = np.empty(ode_steps + 1)
    means[0], vars_[0] = mean0, var0
    big_dt = 2 * dt
    for i in range(ode_steps):
        i2 = 2 * i
        t = times[i2]
        k1 = fwd_rhs(i2, t, fstate)
        k2 = fwd_rhs(i2 + 1, t + dt, fstate + dt * k1)
        k3 = fwd_rhs(i2 + 1, t + dt, fstate + dt * k2)
        k4 = fwd_rhs(i2 + 2, t + big_dt, fstate + big_dt * k3)
        fstate = fstate + big_dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        means[i + 1], vars_[i + 1] = fstate[0], fstate[1]

    m_T, v_T, j_run = fstate
    value = j_run + 0.5 * (cf.gx * (m_T**2 + v_T) + cf.gmean * m_T**2)

    return RiccatiSolution(
        times=times,
        P=P_dense,
        p=Pi_dense - P_dense,
        s=s_dense,
        value=float(value),
        mean_path=means,
        var_path=vars_,
        ode_residual=resid,
    )


# ---------------------------------------------------------------------------
# diagnostics


def regression_slope_diagnostics(solution: FBSDESolution, spec: ProblemSpec):
    """Per-time slope of the backward regression target on the state (1-D).

    Re-fits the one-step target Y_{i+1} + h f̂ on [1, x] at the stored
    ensembles and reports (t, slope, slope_std) with the ordinary
    least-squares standard error, which is the Monte Carlo uncertainty of
    the decoupling field's slope at the fixed point.  Times at which the
    state cloud is degenerate (deterministic initial condition) are
    skipped; the terminal entry fits the terminal adjoint itself.
    """
    if spec.n != 1:
        raise ConfigurationError("slope diagnostics are for scalar states")
    part = solution.partition
    grid, hs = part.grid, part.steps
    out = []
    for i in range(part.n_steps + 1):
        x = solution.states[i][:, 0]
        if np.std(x) <= 1e-12 * (1.0 + np.abs(x).max()):
            continue
        if i == part.n_steps:
            target = terminal_adjoint(
                spec, solution.states[i], EmpiricalMeasure(solution.states[i])
            )[:, 0]
        else:
            drv = mvfbsde_driver(
                spec, float(grid[i]), solution.states[i], solution.adjoints[i],
                solution.zs[i], solution.controls[i],
            )
            target = (solution.adjoints[i + 1] + hs[i] * drv)[:, 0]
        m = x.shape[0]
        xc = x - x.mean()
        sxx = float(xc @ xc)
        slope = float(xc @ (target - target.mean()) / sxx)
        resid = target - target.mean() - slope * xc
        s2 = float(resid @ resid) / max(m - 2, 1)
        out.append((float(grid[i]), slope, float(np.sqrt(s2 / sxx))))
    return out


def fbsde_residual_check(solution: FBSDESolution, spec: ProblemSpec) -> dict:
    """One-step defects of a (partially) converged solution.

    forward_residual re-runs each Euler step from the stored states;
    backward_residual measures Y_i + Z_i dW_i - (Y_{i+1} + h f̂); the
    martingale entry is the worst correlation between the uncorrected
    backward defect and the increments (should be pure Monte Carlo
    noise); optimality delegates to the feedback diagnostic.
    """
    part = solution.partition
    grid, hs = part.grid, part.steps
    tab = spec.dynamics.tabulate(grid[:-1])
    X, Y, Z, A, dW = (
        solution.states, solution.adjoints, solution.zs, solution.controls,
        solution.increments,
    )
    fwd = 0.0
    bwd = 0.0
    mart = 0.0
    for i in range(part.n_steps):
        x_next = kernels.em_single_step(X[i], A[i], *tab.slice(i), dW[i], hs[i])
        fwd = max(fwd, float(np.sqrt(np.mean(np.sum((x_next - X[i + 1]) ** 2, axis=1)))))
        drv = mvfbsde_driver(spec, float(grid[i]), X[i], Y[i], Z[i], A[i])
        e = Y[i + 1] + hs[i] * drv - Y[i] - np.einsum("mpd,md->mp", Z[i], dW[i])
        bwd = max(bwd, float(np.sqrt(np.mean(np.sum(e**2, axis=1)))))
        corr_den = e.std() * dW[i].std()
        if corr_den > 0:
            mart = max(mart, float(abs(np.mean(e[:, :1] * dW[i])) / corr_den))
    return {
        "forward_residual": fwd,
        "backward_residual": bwd,
        "martingale_residual": mart,
        "optimality_residual": solution.optimality_residual,
    }


def monotonicity_probe(spec: ProblemSpec, cloud_pairs, t: float,
                       feedback_map: Optional[FeedbackMap] = None) -> float:
    """Worst violation of the coefficient monotonicity inequality.

    Each element of cloud_pairs is ((X1, Y1, Z1), (X2, Y2, Z2)) with
    equal particle counts; the two clouds are coupled by particle index.
    Returns max over pairs of LHS - RHS, which must stay below a small
    tolerance for convex costs and turns positive for nonconvex ones.
    """
    fmap = feedback_map or make_feedback_map(spec)
    lam = spec.cost.lambda1 + spec.cost.lambda2
    worst = -np.inf
    for (X1, Y1, Z1), (X2, Y2, Z2) in cloud_pairs:
        if X1.shape != X2.shape:
            raise ConfigurationError("monotonicity probe needs equal-size clouds")
        parts = []
        for X, Y, Z in ((X1, Y1, Z1), (X2, Y2, Z2)):
            alpha = fmap.evaluate(t, X, Y, EmpiricalMeasure.joint(X, Y))
            bhat = spec.dynamics.drift(t, X, alpha, X.mean(axis=0), alpha.mean(axis=0))
            sig = spec.dynamics.diffusion(t, X, X.mean(axis=0))
            fhat = mvfbsde_driver(spec, t, X, Y, Z, alpha)
            parts.append((alpha, bhat, sig, fhat))
        (a1, b1v, s1v, f1v), (a2, b2v, s2v, f2v) = parts
        lhs = (
            np.mean(np.sum((b1v - b2v) * (Y1 - Y2), axis=1))
            + np.mean(np.sum((s1v - s2v) * (Z1 - Z2), axis=(1, 2)))
            + np.mean(np.sum((-f1v + f2v) * (X1 - X2), axis=1))
        )
        rhs = -2.0 * lam * np.mean(np.sum((a1 - a2) ** 2, axis=1))
        worst = max(worst, float(lhs - rhs))
    return worst
