"""Problem definition for linear-convex mean-field control.

A problem instance bundles affine dynamics coefficients, a convex cost
model with all first-order derivatives, an action set, a horizon and an
initial law.  Probability measures are uniform-weight particle clouds
throughout; expectations against measure derivatives are sample averages.

Time-dependent coefficients are either closed-form callables of t or
piecewise-constant tables (see :func:`step_function`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, InvariantViolationError, NumericalInputError

__all__ = [
    "EmpiricalMeasure",
    "LinearDynamics",
    "DynamicsTables",
    "CostModel",
    "ActionSet",
    "InitialLaw",
    "DiracLaw",
    "GaussianLaw",
    "Partition",
    "ProblemSpec",
    "as_time_fn",
    "step_function",
    "eval_hamiltonian",
    "eval_reduced_hamiltonian",
    "terminal_adjoint",
    "validate_assumptions",
    "ValidationReport",
]


def as_time_fn(value):
    """Wrap a scalar/array into a constant time-callable; pass callables through."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=np.float64)
    return lambda t, _a=arr: _a


def step_function(grid, values):
    """Left-constant interpolation table t -> values[i] for t in [grid[i], grid[i+1])."""
    grid = np.asarray(grid, dtype=np.float64)
    values = [np.asarray(v, dtype=np.float64) for v in values]
    if len(values) != len(grid) - 1 and len(values) != len(grid):
        raise ConfigurationError("step_function: need one value per cell (or per knot)")

    def fn(t):
        i = int(np.searchsorted(grid, t, side="right")) - 1
        i = min(max(i, 0), len(values) - 1)
        return values[i]

    return fn


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight particle cloud in R^dim."""

    points: np.ndarray  # (M, dim)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        if pts.shape[0] < 1:
            raise ConfigurationError("empirical measure needs at least one sample")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def norm2(self) -> float:
        """Second-moment norm sqrt(E |X|^2)."""
        return float(np.sqrt(np.mean(np.sum(self.points**2, axis=1))))

    def marginal(self, start: int, stop: int) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points[:, start:stop])

    @staticmethod
    def joint(*arrays) -> "EmpiricalMeasure":
        return EmpiricalMeasure(np.column_stack([np.atleast_2d(a) for a in arrays]))


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class DynamicsTables:
    """Coefficients evaluated on a time grid, ready for the step kernels."""

    b0: np.ndarray  # (N, n)
    b1: np.ndarray  # (N, n, n)
    b2: np.ndarray  # (N, n, k)
    bx: np.ndarray  # (N, n, n)
    ba: np.ndarray  # (N, n, k)
    s0: np.ndarray  # (N, n, d)
    s1: np.ndarray  # (N, n, d, n)
    s2: np.ndarray  # (N, n, d, n)

    def slice(self, i):
        return (
            self.b0[i], self.b1[i], self.b2[i], self.bx[i], self.ba[i],
            self.s0[i], self.s1[i], self.s2[i],
        )

    @property
    def has_state_diffusion(self) -> bool:
        return bool(np.any(self.s1 != 0.0) or np.any(self.s2 != 0.0))


@dataclass
class LinearDynamics:
    """Affine drift b0 + b1 x + b2 a + bx x̄ + ba ā and diffusion s0 + s1 x + s2 x̄.

    s1/s2 are linear maps R^n -> R^(n x d), stored as (n, d, n) tensors.
    The concatenation [bx | ba] acts on the joint mean of the state-control
    law; s2 acts on the state-marginal mean only.
    """

    n: int
    k: int
    d: int
    horizon: float
    b0: Callable = 0.0
    b1: Callable = 0.0
    b2: Callable = 0.0
    beta_x: Callable = 0.0
    beta_a: Callable = 0.0
    sigma0: Callable = 0.0
    sigma1: Callable = 0.0
    sigma2: Callable = 0.0

    def __post_init__(self):
        if min(self.n, self.k, self.d) < 1 or self.horizon <= 0:
            raise ConfigurationError("dimensions must be positive and horizon > 0")
        self.b0 = self._wrap(self.b0, (self.n,))
        self.b1 = self._wrap(self.b1, (self.n, self.n))
        self.b2 = self._wrap(self.b2, (self.n, self.k))
        self.beta_x = self._wrap(self.beta_x, (self.n, self.n))
        self.beta_a = self._wrap(self.beta_a, (self.n, self.k))
        self.sigma0 = self._wrap(self.sigma0, (self.n, self.d))
        self.sigma1 = self._wrap(self.sigma1, (self.n, self.d, self.n))
        self.sigma2 = self._wrap(self.sigma2, (self.n, self.d, self.n))

    def _wrap(self, value, shape):
        fn = as_time_fn(value)

        def eval_at(t, _fn=fn, _shape=shape):
            out = np.asarray(_fn(t), dtype=np.float64)
            if out.shape == () or out.shape == (1,):
                out = np.broadcast_to(np.reshape(out, ()), _shape) * np.ones(_shape)
            if out.shape != _shape:
                raise ConfigurationError(
                    f"coefficient shape {out.shape} != expected {_shape}"
                )
            return out

        return eval_at

    def tabulate(self, times) -> DynamicsTables:
        times = np.asarray(times, dtype=np.float64)
        return DynamicsTables(
            b0=np.stack([self.b0(t) for t in times]),
            b1=np.stack([self.b1(t) for t in times]),
            b2=np.stack([self.b2(t) for t in times]),
            bx=np.stack([self.beta_x(t) for t in times]),
            ba=np.stack([self.beta_a(t) for t in times]),
            s0=np.stack([self.sigma0(t) for t in times]),
            s1=np.stack([self.sigma1(t) for t in times]),
            s2=np.stack([self.sigma2(t) for t in times]),
        )

    def drift(self, t, x, a, xbar, abar):
        """Drift at a batch of particles; xbar/abar are the law means."""
        x = np.atleast_2d(x)
        a = np.atleast_2d(a)
        return (
            self.b0(t)
            + x @ self.b1(t).T
            + a @ self.b2(t).T
            + (self.beta_x(t) @ xbar + self.beta_a(t) @ abar)
        )

    def diffusion(self, t, x, xbar):
        """Diffusion matrices (M, n, d) at a batch of particles."""
        x = np.atleast_2d(x)
        return (
            self.sigma0(t)
            + np.einsum("pdj,mj->mpd", self.sigma1(t), x)
            + self.sigma2(t) @ xbar
        )


# ---------------------------------------------------------------------------
# costs


def _default_avg_mu_f(cost, t, X, A, eta, Xq, Aq):
    acc = np.zeros((Xq.shape[0], Xq.shape[1]))
    for j in range(X.shape[0]):
        acc += cost.grad_mu_f(t, X[j], A[j], eta)(Xq, Aq)
    return acc / X.shape[0]


def _default_avg_nu_f(cost, t, X, A, eta, Xq, Aq):
    acc = np.zeros((Aq.shape[0], Aq.shape[1]))
    for j in range(X.shape[0]):
        acc += cost.grad_nu_f(t, X[j], A[j], eta)(Xq, Aq)
    return acc / X.shape[0]


def _default_avg_mu_g(cost, mu, Xq):
    acc = np.zeros_like(np.atleast_2d(Xq))
    for j in range(mu.size):
        acc += cost.grad_mu_g(mu.points[j], mu)(Xq)
    return acc / mu.size


@dataclass
class CostModel:
    """Running cost f(t,x,a,eta), terminal cost g(x,mu) and first derivatives.

    All state/control arguments are batched: X (M,n), A (M,k); f and g
    return (M,).  Measure-derivative kernels come in two forms:

    * pointwise: ``grad_mu_f(t, x, a, eta)`` returns a kernel evaluated at
      query batches, matching the per-sample derivative of the lifted map
      (used by validation probes);
    * averaged: ``avg_grad_mu_f(t, X, A, eta, Xq, Aq)`` is the cloud
      average of the pointwise kernels at the query points.  The default
      loops over the cloud; built-in instances override it with closed
      forms so simulation stays O(M).

    lambda1 / lambda2 are the declared convexity moduli of f in the
    control and in the control law.
    """

    f: Callable
    g: Callable
    grad_x_f: Callable
    grad_a_f: Callable
    grad_x_g: Callable
    grad_mu_f: Callable
    grad_nu_f: Callable
    grad_mu_g: Callable
    lambda1: float
    lambda2: float
    avg_grad_mu_f: Optional[Callable] = None
    avg_grad_nu_f: Optional[Callable] = None
    avg_grad_mu_g: Optional[Callable] = None

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("convexity moduli must be nonnegative")
        if self.avg_grad_mu_f is None:
            self.avg_grad_mu_f = lambda t, X, A, eta, Xq, Aq: _default_avg_mu_f(
                self, t, X, A, eta, Xq, Aq
            )
        if self.avg_grad_nu_f is None:
            self.avg_grad_nu_f = lambda t, X, A, eta, Xq, Aq: _default_avg_nu_f(
                self, t, X, A, eta, Xq, Aq
            )
        if self.avg_grad_mu_g is None:
            self.avg_grad_mu_g = lambda mu, Xq: _default_avg_mu_g(self, mu, Xq)


# ---------------------------------------------------------------------------
# action sets


@dataclass
class ActionSet:
    """Nonempty closed convex action set: full space, box, or ball."""

    kind: str = "full"  # full | box | ball
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("full", "box", "ball"):
            raise ConfigurationError(f"unknown action set kind {self.kind!r}")
        if self.kind == "box":
            self.lo = np.asarray(self.lo, dtype=np.float64)
            self.hi = np.asarray(self.hi, dtype=np.float64)
            if np.any(self.lo > self.hi):
                raise ConfigurationError("box action set needs lo <= hi")
        if self.kind == "ball":
            self.center = np.asarray(self.center, dtype=np.float64)
            self.radius = float(self.radius)
            if self.radius < 0:
                raise ConfigurationError("ball radius must be nonnegative")

    @property
    def bound_radius(self) -> Optional[float]:
        """Radius of a ball containing the set, None when unbounded."""
        if self.kind == "box":
            if np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)):
                return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))
            return None
        if self.kind == "ball":
            return float(np.linalg.norm(self.center) + self.radius)
        return None

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "full":
            return v
        if self.kind == "box":
            return np.clip(v, self.lo, self.hi)
        out = v
        # rescaling can land a hair outside by roundoff; iterate to an
        # exact fixed point so projection is exactly idempotent
        for _ in range(4):
            delta = out - self.center
            norms = np.linalg.norm(delta, axis=-1, keepdims=True)
            mask = norms > self.radius
            if not np.any(mask):
                return out
            scale = np.ones_like(norms)
            np.divide(self.radius, norms, out=scale, where=mask)
            out = np.where(mask, self.center + delta * scale, out)
        return out

    def tangent_step(self, v, g):
        """Projection of -g onto the tangent cone of the set at v.

        v must already satisfy v == project(v).  The row norms of the
        result measure first-order stationarity: they vanish exactly at
        KKT points of min <g, .> over the set.
        """
        g = np.asarray(g, dtype=np.float64)
        if self.kind == "full":
            return -g
        if self.kind == "box":
            out = -g
            at_lo = np.isclose(v, self.lo, rtol=0.0, atol=0.0) if self.lo is not None else False
            at_hi = np.isclose(v, self.hi, rtol=0.0, atol=0.0) if self.hi is not None else False
            out = np.where(at_lo, np.maximum(out, 0.0), out)
            out = np.where(at_hi & ~at_lo, np.minimum(out, 0.0), out)
            return out
        delta = v - self.center
        norms = np.linalg.norm(delta, axis=-1, keepdims=True)
        on_boundary = norms >= self.radius * (1.0 - 1e-12)
        out = -g
        if np.any(on_boundary) and self.radius > 0:
            unit = np.where(norms > 0, delta / np.maximum(norms, 1e-300), 0.0)
            radial = np.sum(out * unit, axis=-1, keepdims=True)
            out = np.where(on_boundary, out - np.maximum(radial, 0.0) * unit, out)
        return out


# ---------------------------------------------------------------------------
# initial laws

_INIT_STREAM = np.uint64(0xFFFFFFFF00000001)


class InitialLaw:
    """Seedable sampler for the initial state with declared norm moments."""

    n: int

    def sample(self, seed: int, m: int) -> np.ndarray:
        raise NotImplementedError

    def norm_lp(self, p: float) -> float:
        """L^p norm E[|xi|^p]^(1/p)."""
        raise NotImplementedError


@dataclass
class DiracLaw(InitialLaw):
    point: np.ndarray

    def __post_init__(self):
        self.point = np.atleast_1d(np.asarray(self.point, dtype=np.float64))
        self.n = self.point.shape[0]

    def sample(self, seed, m):
        return np.tile(self.point, (m, 1))

    def norm_lp(self, p):
        return float(np.linalg.norm(self.point))


@dataclass
class GaussianLaw(InitialLaw):
    mean: np.ndarray
    std: np.ndarray  # per-coordinate standard deviations

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.broadcast_to(
            np.asarray(self.std, dtype=np.float64), self.mean.shape
        ).copy()
        self.n = self.mean.shape[0]

    def sample(self, seed, m):
        key = np.array([np.uint64(seed & (2**64 - 1)), _INIT_STREAM], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return self.mean + gen.standard_normal((m, self.n)) * self.std

    def norm_lp(self, p):
        if self.n == 1:
            # Gauss-Hermite quadrature for E|m + s Z|^p
            nodes, weights = np.polynomial.hermite_e.hermegauss(96)
            vals = np.abs(self.mean[0] + self.std[0] * nodes) ** p
            moment = float(np.sum(weights * vals) / np.sqrt(2.0 * np.pi))
        else:
            gen = np.random.Generator(np.random.Philox(key=np.uint64(12345)))
            z = self.mean + gen.standard_normal((200_000, self.n)) * self.std
            moment = float(np.mean(np.linalg.norm(z, axis=1) ** p))
        return moment ** (1.0 / p)


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    """Strictly increasing time grid t_0 = 0 < ... < t_N = T."""

    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 1 or grid.shape[0] < 2:
            raise ConfigurationError("partition needs at least two knots")
        if grid[0] != 0.0:
            raise ConfigurationError("partition must start at t=0")
        if np.any(np.diff(grid) <= 0):
            raise ConfigurationError("partition grid must be strictly increasing")

    @classmethod
    def uniform(cls, n_steps: int, horizon: float) -> "Partition":
        return cls(horizon * np.arange(n_steps + 1) / n_steps)

    @property
    def n_steps(self) -> int:
        return self.grid.shape[0] - 1

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def mesh(self) -> float:
        return float(np.max(self.steps))

    def refines(self, coarse: "Partition") -> bool:
        """True when every knot of `coarse` appears in this grid."""
        tol = 1e-12 * max(1.0, self.horizon)
        idx = np.searchsorted(self.grid, coarse.grid)
        idx = np.clip(idx, 0, self.grid.shape[0] - 1)
        best = np.minimum(
            np.abs(self.grid[idx] - coarse.grid),
            np.abs(self.grid[np.maximum(idx - 1, 0)] - coarse.grid),
        )
        return bool(np.all(best <= tol))

    def index_of(self, times) -> np.ndarray:
        """Indices of given knots in this grid (ConfigurationError if absent)."""
        tol = 1e-12 * max(1.0, self.horizon)
        idx = np.searchsorted(self.grid, np.asarray(times) - tol)
        if np.any(idx >= self.grid.shape[0]) or np.any(
            np.abs(self.grid[np.minimum(idx, self.grid.shape[0] - 1)] - times) > tol
        ):
            raise ConfigurationError("times are not knots of this partition")
        return idx


# ---------------------------------------------------------------------------
# problem spec


@dataclass
class ProblemSpec:
    """Complete description of one mean-field control instance."""

    dynamics: LinearDynamics
    cost: CostModel
    action: ActionSet
    initial_law: InitialLaw
    kind: str = "custom"  # lq1d | example1 | example2 | custom
    lq: object = None  # LQCoefficients for kind == "lq1d" (see feedback module)
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("lq1d", "example1", "example2", "custom"):
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        if self.initial_law.n != self.dynamics.n:
            raise ConfigurationError("initial law dimension != state dimension")
        if self.kind == "lq1d":
            if not (self.dynamics.n == self.dynamics.k == self.dynamics.d == 1):
                raise ConfigurationError("lq1d requires n = k = d = 1")
            if self.lq is None:
                raise ConfigurationError("lq1d spec needs LQ coefficients attached")

    @property
    def n(self):
        return self.dynamics.n

    @property
    def k(self):
        return self.dynamics.k

    @property
    def d(self):
        return self.dynamics.d

    @property
    def horizon(self):
        return self.dynamics.horizon


# ---------------------------------------------------------------------------
# Hamiltonians and the terminal adjoint


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalInputError("non-finite numerical input")


def eval_hamiltonian(spec: ProblemSpec, t, x, a, eta: EmpiricalMeasure, y, z) -> float:
    """Full Hamiltonian <b, y> + <sigma, z> + f at one point.

    eta is a cloud over (state, control) pairs; the drift sees its joint
    mean and the diffusion the state-marginal mean only.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64).reshape(spec.n, spec.d)
    if x.shape != (spec.n,) or a.shape != (spec.k,) or y.shape != (spec.n,):
        raise ConfigurationError("eval_hamiltonian: dimension mismatch")
    if eta.dim != spec.n + spec.k:
        raise ConfigurationError("eval_hamiltonian: measure dimension mismatch")
    _check_finite(x, a, y, z, eta.points)
    emean = eta.mean()
    xbar, abar = emean[: spec.n], emean[spec.n :]
    b = spec.dynamics.drift(t, x[None, :], a[None, :], xbar, abar)[0]
    sig = spec.dynamics.diffusion(t, x[None, :], xbar)[0]
    fval = float(spec.cost.f(t, x[None, :], a[None, :], eta)[0])
    return float(b @ y + np.sum(sig * z) + fval)


def eval_reduced_hamiltonian(spec: ProblemSpec, t, x, a, eta: EmpiricalMeasure, y) -> float:
    """Hamiltonian without the diffusion pairing (equals the full one at z=0)."""
    return eval_hamiltonian(spec, t, x, a, eta, y, np.zeros((spec.n, spec.d)))


def terminal_adjoint(spec: ProblemSpec, x, mu: EmpiricalMeasure) -> np.ndarray:
    """Terminal adjoint grad_x g(x, mu) + cloud-average of grad_mu g(., mu)(x).

    Accepts a batch of query states (Q, n) or a single state (n,).
    """
    single = np.ndim(x) == 1
    xq = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = spec.cost.grad_x_g(xq, mu) + spec.cost.avg_grad_mu_g(mu, xq)
    if not np.all(np.isfinite(out)):
        raise NumericalInputError("terminal adjoint produced non-finite values")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# probe-based validation of the standing assumptions


@dataclass
class ValidationClause:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    worst_probe: Optional[dict] = None

    def to_json(self):
        out = {"name": self.name, "passed": bool(self.passed), "detail": self.detail}
        if self.worst_probe is not None:
            out["worst_probe"] = self.worst_probe
        return out


@dataclass
class ValidationReport:
    clauses: list

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name) -> ValidationClause:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self):
        return {
            "all_passed": self.all_passed,
            "clauses": [c.to_json() for c in self.clauses],
        }


def _probe_points(spec, rng, cloud=8, scale=1.5):
    x = scale * rng.standard_normal(spec.n)
    a = spec.action.project(scale * rng.standard_normal(spec.k))
    pts = scale * rng.standard_normal((cloud, spec.n + spec.k))
    pts[:, spec.n :] = spec.action.project(pts[:, spec.n :])
    return x, a, EmpiricalMeasure(pts)


def _fd_gradient(fun, v, eps=1e-6):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    for i in range(v.size):
        vp = v.copy()
        vm = v.copy()
        vp.flat[i] += eps
        vm.flat[i] -= eps
        out.flat[i] = (fun(vp) - fun(vm)) / (2 * eps)
    return out


def validate_assumptions(spec: ProblemSpec, probes: int = 50, seed: int = 0) -> ValidationReport:
    """Probe the standing assumptions; failures become report entries.

    Clauses: coefficient boundedness on a 1000-point grid, derivative
    consistency against central differences, gradient Lipschitz ratios,
    the convexity inequality with the declared moduli, and time-Hoelder
    ratio growth of the coefficients on dyadic gaps.
    """
    rng = np.random.default_rng(seed)
    clauses = []
    T = spec.horizon
    dyn = spec.dynamics
    cost = spec.cost

    # -- boundedness: sup over a 1000-point grid is finite
    ts = np.linspace(0.0, T, 1000)
    sups = {}
    ok = True
    for nm in ("b0", "b1", "b2", "beta_x", "beta_a", "sigma0", "sigma1", "sigma2"):
        fn = getattr(dyn, nm)
        vals = np.stack([np.abs(fn(t)).max() for t in ts])
        sups[nm] = float(vals.max())
        ok = ok and bool(np.all(np.isfinite(vals)))
    clauses.append(ValidationClause("coefficient_boundedness", ok, {"sup_norms": sups}))

    # -- derivative consistency vs central differences (rel err <= 1e-4)
    worst = 0.0
    worst_probe = None
    for _ in range(probes):
        t = rng.uniform(0.0, T)
        x, a, eta = _probe_points(spec, rng)
        scale_ref = max(1.0, abs(float(cost.f(t, x[None], a[None], eta)[0])))

        gx = cost.grad_x_f(t, x[None], a[None], eta)[0]
        fd = _fd_gradient(lambda v: float(cost.f(t, v[None], a[None], eta)[0]), x)
        err = np.max(np.abs(gx - fd)) / max(1.0, np.max(np.abs(fd)))
        ga = cost.grad_a_f(t, x[None], a[None], eta)[0]
        fda = _fd_gradient(lambda v: float(cost.f(t, x[None], v[None], eta)[0]), a)
        err = max(err, np.max(np.abs(ga - fda)) / max(1.0, np.max(np.abs(fda))))

        # measure kernels via the lifted-cloud identity: d/dp_j f = kernel(p_j)/M
        j = int(rng.integers(eta.size))
        base = eta.points.copy()

        def f_of_point(v, cols):
            pts = base.copy()
            pts[j, cols] = v
            return float(cost.f(t, x[None], a[None], EmpiricalMeasure(pts))[0])

        kmu = cost.grad_mu_f(t, x, a, eta)(base[j : j + 1, : spec.n], base[j : j + 1, spec.n :])[0]
        fdmu = eta.size * _fd_gradient(
            lambda v: f_of_point(v, slice(0, spec.n)), base[j, : spec.n]
        )
        err = max(err, np.max(np.abs(kmu - fdmu)) / max(1.0, np.max(np.abs(fdmu)), scale_ref * 1e-3))
        knu = cost.grad_nu_f(t, x, a, eta)(base[j : j + 1, : spec.n], base[j : j + 1, spec.n :])[0]
        fdnu = eta.size * _fd_gradient(
            lambda v: f_of_point(v, slice(spec.n, spec.n + spec.k)), base[j, spec.n :]
        )
        err = max(err, np.max(np.abs(knu - fdnu)) / max(1.0, np.max(np.abs(fdnu)), scale_ref * 1e-3))

        mu = eta.marginal(0, spec.n)
        ggx = cost.grad_x_g(x[None], mu)[0]
        fdg = _fd_gradient(lambda v: float(cost.g(v[None], mu)[0]), x)
        err = max(err, np.max(np.abs(ggx - fdg)) / max(1.0, np.max(np.abs(fdg))))

        if err > worst:
            worst, worst_probe = err, {"t": float(t), "x": x.tolist(), "a": a.tolist()}
    clauses.append(
        ValidationClause(
            "derivative_consistency", worst <= 1e-4, {"max_rel_err": float(worst)}, worst_probe
        )
    )

    # -- gradient Lipschitz ratios on probe pairs (finite, recorded)
    max_ratio = 0.0
    ok = True
    for _ in range(probes):
        t = rng.uniform(0.0, T)
        x1, a1, eta1 = _probe_points(spec, rng)
        x2, a2, eta2 = _probe_points(spec, rng)
        g1 = np.concatenate(
            [cost.grad_x_f(t, x1[None], a1[None], eta1)[0], cost.grad_a_f(t, x1[None], a1[None], eta1)[0]]
        )
        g2 = np.concatenate(
            [cost.grad_x_f(t, x2[None], a2[None], eta2)[0], cost.grad_a_f(t, x2[None], a2[None], eta2)[0]]
        )
        dist = np.linalg.norm(x1 - x2) + np.linalg.norm(a1 - a2) + wasserstein2_cloud(eta1, eta2)
        if dist > 1e-9:
            ratio = float(np.linalg.norm(g1 - g2) / dist)
            ok = ok and np.isfinite(ratio)
            max_ratio = max(max_ratio, ratio)
    clauses.append(ValidationClause("gradient_lipschitz", ok, {"max_ratio": float(max_ratio)}))

    # -- convexity inequality with the declared moduli
    lam1, lam2 = cost.lambda1, cost.lambda2
    min_resid = math.inf
    worst_probe = None
    if lam1 + lam2 <= 0:
        clauses.append(
            ValidationClause(
                "convexity", False, {"reason": "declared lambda1 + lambda2 must be positive",
                                     "lambda1": lam1, "lambda2": lam2}
            )
        )
    else:
        for _ in range(probes):
            t = rng.uniform(0.0, T)
            x1, a1, eta1 = _probe_points(spec, rng)
            shift = rng.standard_normal(eta1.points.shape)
            pts2 = eta1.points + shift
            pts2[:, spec.n :] = spec.action.project(pts2[:, spec.n :])
            eta2 = EmpiricalMeasure(pts2)
            x2 = x1 + rng.standard_normal(spec.n)
            a2 = spec.action.project(a1 + rng.standard_normal(spec.k))
            f1 = float(cost.f(t, x1[None], a1[None], eta1)[0])
            f2 = float(cost.f(t, x2[None], a2[None], eta2)[0])
            gx = cost.grad_x_f(t, x1[None], a1[None], eta1)[0]
            ga = cost.grad_a_f(t, x1[None], a1[None], eta1)[0]
            pair_mu = 0.0
            for j in range(eta1.size):
                kx = cost.grad_mu_f(t, x1, a1, eta1)(
                    eta1.points[j : j + 1, : spec.n], eta1.points[j : j + 1, spec.n :]
                )[0]
                ka = cost.grad_nu_f(t, x1, a1, eta1)(
                    eta1.points[j : j + 1, : spec.n], eta1.points[j : j + 1, spec.n :]
                )[0]
                pair_mu += kx @ (pts2[j, : spec.n] - eta1.points[j, : spec.n])
                pair_mu += ka @ (pts2[j, spec.n :] - eta1.points[j, spec.n :])
            pair_mu /= eta1.size
            da2 = float(np.sum((pts2[:, spec.n :] - eta1.points[:, spec.n :]) ** 2, axis=1).mean())
            resid = (
                f2 - f1 - gx @ (x2 - x1) - ga @ (a2 - a1) - pair_mu
                - lam1 * float(np.sum((a2 - a1) ** 2)) - lam2 * da2
            )
            if resid < min_resid:
                min_resid, worst_probe = resid, {"t": float(t)}
            # terminal cost convexity
            mu1 = eta1.marginal(0, spec.n)
            mu2 = eta2.marginal(0, spec.n)
            g1 = float(cost.g(x1[None], mu1)[0])
            g2v = float(cost.g(x2[None], mu2)[0])
            ggx = cost.grad_x_g(x1[None], mu1)[0]
            pair_g = 0.0
            for j in range(mu1.size):
                kg = cost.grad_mu_g(mu1.points[j], mu1)(x1[None])[0]
                pair_g += kg @ (mu2.points[j] - mu1.points[j])
            pair_g /= mu1.size
            residg = g2v - g1 - ggx @ (x2 - x1) - pair_g
            if residg < min_resid:
                min_resid, worst_probe = residg, {"t": float(t), "part": "terminal"}
        clauses.append(
            ValidationClause(
                "convexity", min_resid >= -1e-9,
                {"min_residual": float(min_resid), "lambda1": lam1, "lambda2": lam2},
                worst_probe,
            )
        )

    # -- time-Hoelder ratios: growth across dyadic gap levels flags roughness
    gaps = [T * 2.0**-j for j in range(3, 13)]
    ratios = []
    f_probes = [_probe_points(spec, rng) for _ in range(3)]
    f_probes.append((1.5 * np.ones(spec.n), spec.action.project(1.5 * np.ones(spec.k)),
                     f_probes[0][2]))
    random_anchors = rng.uniform(0.0, T, size=8)
    for gap in gaps:
        # pairs straddling the 16ths of the horizon catch isolated jumps
        # at every gap level; random anchors cover the rest
        dyadic = [max(0.0, j * T / 16.0 - gap / 2.0) for j in range(1, 16)]
        worst_gap = 0.0
        for t0 in list(random_anchors) + dyadic:
            t1 = min(t0 + gap, T)
            if t1 <= t0:
                continue
            move = 0.0
            for nm in ("b0", "b1", "b2", "beta_x", "beta_a", "sigma0", "sigma1", "sigma2"):
                fn = getattr(dyn, nm)
                move += float(np.abs(fn(t1) - fn(t0)).max())
            fmove = 0.0
            for xp, ap, etap in f_probes:
                norm = 1.0 + float(
                    np.abs(xp).max() ** 2 + np.abs(ap).max() ** 2 + etap.norm2() ** 2
                )
                fmove = max(
                    fmove,
                    abs(
                        float(cost.f(t1, xp[None], ap[None], etap)[0])
                        - float(cost.f(t0, xp[None], ap[None], etap)[0])
                    ) / norm,
                )
            worst_gap = max(worst_gap, (move + fmove) / math.sqrt(t1 - t0))
        ratios.append(worst_gap)
    # a half-Hoelder coefficient keeps these ratios flat; a jump grows them
    # by sqrt(gap ratio) between the halves (factor 8 here); smooth
    # coefficients shrink them
    coarse = max(ratios[: len(ratios) // 2])
    fine = max(ratios[len(ratios) // 2 :])
    holder_ok = fine <= 3.0 * max(coarse, 1e-12) if fine > 1e-12 else True
    clauses.append(
        ValidationClause(
            "time_holder", holder_ok,
            {"ratios_per_gap": [float(r) for r in ratios], "coarse_max": float(coarse),
             "fine_max": float(fine)},
        )
    )

    return ValidationReport(clauses)


def wasserstein2_cloud(p: EmpiricalMeasure, q: EmpiricalMeasure) -> float:
    """2-Wasserstein surrogate between equal-size clouds.

    Exact sorted coupling per coordinate in 1-D; for multi-dimensional
    clouds the per-coordinate quantile couplings give an upper bound,
    which is the conservative direction for Lipschitz probes.
    """
    if p.size != q.size:
        raise ConfigurationError("wasserstein2 needs equal sample counts")
    a = np.sort(p.points, axis=0)
    b = np.sort(q.points, axis=0)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))
