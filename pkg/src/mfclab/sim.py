"""Particle simulation of the controlled mean-field dynamics.

Explicit Euler stepping with left-endpoint coefficients and pre-step
empirical means, shared Brownian increments from a counter-based store,
and the discretized cost functional (left-endpoint rule).

Reproducibility contract: the Brownian store is keyed by
(seed, particle, base step), increments are quantized to a dyadic grid
(2^-32) so that sums over dyadic refinements are exact in double
precision, and all particle arrays are kept in particle-id order so
cross-particle reductions are order-canonical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import kernels
from .errors import ConfigurationError, DivergenceError
from .model import EmpiricalMeasure, Partition, ProblemSpec

__all__ = [
    "BrownianStore",
    "ControlPath",
    "Trajectory",
    "em_step",
    "simulate_discrete",
    "simulate_fine",
    "cost_discrete",
    "cost_fine",
    "project_control_to_partition",
    "embed_control_to_partition",
    "h2_distance",
    "wasserstein2_1d",
    "draw_initial",
]

QUANTUM = 2.0**-32
DIVERGENCE_LIMIT = 1e12


class BrownianStore:
    """Counter-based, refinement-consistent Brownian increments.

    Increments over any interval aligned with the base grid equal the sum
    of their base sub-increments bit-exactly (quantization makes float
    addition associative here).  Uniform levels are cached up to a byte
    budget; coarser levels derive from cached finer ones by exact block
    sums.
    """

    def __init__(self, seed: int, n_particles: int, n_noise: int, horizon: float,
                 base_steps: int, cache_bytes: float = 1.5e9):
        if base_steps < 1 or n_particles < 1 or n_noise < 1 or horizon <= 0:
            raise ConfigurationError("bad BrownianStore arguments")
        self.seed = int(seed)
        self.n_particles = int(n_particles)
        self.n_noise = int(n_noise)
        self.horizon = float(horizon)
        self.base_steps = int(base_steps)
        self.cache_bytes = float(cache_bytes)
        self._cache = {}

    def base_increment(self, step: int) -> np.ndarray:
        """Quantized N(0, h_base) increments for all particles at one base step."""
        key = np.array([np.uint64(self.seed & (2**64 - 1)), np.uint64(step)], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        z = gen.standard_normal((self.n_particles, self.n_noise))
        z *= np.sqrt(self.horizon / self.base_steps)
        return np.round(z / QUANTUM) * QUANTUM

    def _cache_size(self):
        return sum(a.nbytes for a in self._cache.values())

    def _uniform_increments(self, n_steps: int) -> np.ndarray:
        if n_steps in self._cache:
            return self._cache[n_steps]
        if self.base_steps % n_steps != 0:
            raise ConfigurationError(
                f"{n_steps} steps do not divide the base grid ({self.base_steps})"
            )
        finer = [m for m in self._cache if m % n_steps == 0]
        if finer:
            src = self._cache[min(finer)]
            ratio = min(finer) // n_steps
            arr = src.reshape(n_steps, ratio, self.n_particles, self.n_noise).sum(axis=1)
        else:
            ratio = self.base_steps // n_steps
            arr = np.zeros((n_steps, self.n_particles, self.n_noise))
            for b in range(self.base_steps):
                arr[b // ratio] += self.base_increment(b)
        if arr.nbytes + self._cache_size() <= self.cache_bytes:
            self._cache[n_steps] = arr
        return arr

    def _grid_indices(self, partition: Partition) -> np.ndarray:
        scale = self.base_steps / self.horizon
        idx = np.round(partition.grid * scale).astype(np.int64)
        if np.any(np.abs(idx / scale - partition.grid) > 1e-12 * max(1.0, self.horizon)):
            raise ConfigurationError("partition is not aligned with the store base grid")
        return idx

    def increments(self, partition: Partition) -> np.ndarray:
        """(N, M, d) increments for the given (base-aligned) partition."""
        idx = self._grid_indices(partition)
        n = partition.n_steps
        ratios = np.diff(idx)
        if np.all(ratios == ratios[0]) and idx[0] == 0 and idx[-1] == self.base_steps:
            return self._uniform_increments(n)
        out = np.zeros((n, self.n_particles, self.n_noise))
        for i in range(n):
            for b in range(idx[i], idx[i + 1]):
                out[i] += self.base_increment(b)
        return out


def draw_initial(spec: ProblemSpec, store: BrownianStore) -> np.ndarray:
    """Initial particle states; tied to the store seed so runs couple across levels."""
    return spec.initial_law.sample(store.seed, store.n_particles)


# ---------------------------------------------------------------------------
# control paths and trajectories


@dataclass
class ControlPath:
    """Piecewise-constant control values, one point of A per interval per particle."""

    partition: Partition
    values: np.ndarray  # (N, M, k)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.partition.n_steps:
            raise ConfigurationError("control values must have shape (N, M, k)")

    @classmethod
    def constant(cls, partition: Partition, n_particles: int, value) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        vals = np.tile(value, (partition.n_steps, n_particles, 1))
        return cls(partition, vals)

    @property
    def n_particles(self):
        return self.values.shape[1]


@dataclass
class Trajectory:
    partition: Partition
    states: np.ndarray  # (N+1, M, n)
    controls: Optional[np.ndarray] = None  # (N, M, k)

    @property
    def n_particles(self):
        return self.states.shape[1]

    def state_means(self) -> np.ndarray:
        return self.states.mean(axis=1)

    def measure_at(self, i: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[i])


# ---------------------------------------------------------------------------
# stepping and simulation


def _locate_divergence(states, step):
    bad = states[step + 1]
    rows = np.where(~np.isfinite(bad).all(axis=1) | (np.abs(bad).max(axis=1) > DIVERGENCE_LIMIT))[0]
    particle = int(rows[0]) if rows.size else -1
    return particle


def em_step(spec: ProblemSpec, t: float, h: float, states, controls, dW) -> np.ndarray:
    """One explicit Euler step; empirical means are taken before the move."""
    if h <= 0:
        raise ConfigurationError("step size must be positive")
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    w = np.atleast_2d(np.asarray(dW, dtype=np.float64))
    if x.shape[0] != a.shape[0] or x.shape[0] != w.shape[0]:
        raise ConfigurationError("ensemble sizes disagree")
    dyn = spec.dynamics
    out = kernels.em_single_step(
        x, a, dyn.b0(t), dyn.b1(t), dyn.b2(t), dyn.beta_x(t), dyn.beta_a(t),
        dyn.sigma0(t), dyn.sigma1(t), dyn.sigma2(t), w, h,
    )
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > DIVERGENCE_LIMIT:
        rows = np.where(~np.isfinite(out).all(axis=1) | (np.abs(out).max(axis=1) > DIVERGENCE_LIMIT))[0]
        raise DivergenceError(
            f"state diverged for particle {int(rows[0])}", particle=int(rows[0])
        )
    return out


def simulate_discrete(spec: ProblemSpec, partition: Partition, control: ControlPath,
                      store: BrownianStore) -> Trajectory:
    """Euler path of the particle system under a piecewise-constant control."""
    if not np.array_equal(control.partition.grid, partition.grid):
        raise ConfigurationError("control partition does not match the simulation grid")
    if control.n_particles != store.n_particles:
        raise ConfigurationError("control particle count does not match the store")
    x0 = draw_initial(spec, store)
    tab = spec.dynamics.tabulate(partition.grid[:-1])
    dW = store.increments(partition)
    states, bad = kernels.em_forward_path(
        x0, tab.b0, tab.b1, tab.b2, tab.bx, tab.ba, tab.s0, tab.s1, tab.s2,
        control.values, dW, partition.steps,
    )
    if bad >= 0:
        particle = _locate_divergence(states, bad)
        raise DivergenceError(
            f"state diverged at step {bad} (particle {particle})",
            particle=particle, step=bad,
        )
    return Trajectory(partition, states, controls=control.values)


def simulate_fine(spec: ProblemSpec, fine_partition: Partition, control_source,
                  store: BrownianStore) -> Trajectory:
    """Fine-grid Euler surrogate of the continuous dynamics.

    control_source is either a ControlPath on a coarser nested partition
    (values held constant across fine sub-steps) or any object with a
    ``controls_at(t, states) -> (M, k)`` method (e.g. a feedback flow
    built from a decoupling field).
    """
    if isinstance(control_source, ControlPath):
        embedded = embed_control_to_partition(control_source, fine_partition)
        return simulate_discrete(spec, fine_partition, embedded, store)
    x = draw_initial(spec, store)
    dW = store.increments(fine_partition)
    hs = fine_partition.steps
    n_steps = fine_partition.n_steps
    states = np.empty((n_steps + 1, store.n_particles, spec.n))
    controls = np.empty((n_steps, store.n_particles, spec.k))
    states[0] = x
    dyn = spec.dynamics
    for i in range(n_steps):
        t = float(fine_partition.grid[i])
        a = spec.action.project(control_source.controls_at(t, x))
        controls[i] = a
        x = kernels.em_single_step(
            x, a, dyn.b0(t), dyn.b1(t), dyn.b2(t), dyn.beta_x(t), dyn.beta_a(t),
            dyn.sigma0(t), dyn.sigma1(t), dyn.sigma2(t), dW[i], hs[i],
        )
        states[i + 1] = x
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            particle = _locate_divergence(states, i)
            raise DivergenceError(
                f"state diverged at step {i} (particle {particle})",
                particle=particle, step=i,
            )
    return Trajectory(fine_partition, states, controls=controls)


# ---------------------------------------------------------------------------
# cost functionals


def per_sample_cost(spec: ProblemSpec, partition: Partition, trajectory: Trajectory,
                    controls: np.ndarray) -> np.ndarray:
    """Per-particle discretized cost (left-endpoint rule)."""
    if not np.array_equal(trajectory.partition.grid, partition.grid):
        raise ConfigurationError("trajectory grid does not match the partition")
    if controls.shape[0] != partition.n_steps:
        raise ConfigurationError("control shape does not match the partition")
    hs = partition.steps
    acc = np.zeros(trajectory.n_particles)
    for i in range(partition.n_steps):
        xi = trajectory.states[i]
        ai = controls[i]
        eta = EmpiricalMeasure.joint(xi, ai)
        acc += spec.cost.f(float(partition.grid[i]), xi, ai, eta) * hs[i]
    xT = trajectory.states[-1]
    acc += spec.cost.g(xT, EmpiricalMeasure(xT))
    return acc


def cost_discrete(spec: ProblemSpec, partition: Partition, trajectory: Trajectory,
                  control: ControlPath):
    """(value, mc_std) of the discretized cost under the given control."""
    samples = per_sample_cost(spec, partition, trajectory, control.values)
    value = float(samples.mean())
    m = samples.shape[0]
    mc_std = float(samples.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return value, mc_std


def cost_fine(spec: ProblemSpec, fine_partition: Partition, trajectory: Trajectory,
              control_source=None):
    """Fine-grid cost; the trajectory must carry its controls."""
    controls = trajectory.controls
    if controls is None and isinstance(control_source, ControlPath):
        controls = embed_control_to_partition(control_source, fine_partition).values
    if controls is None:
        raise ConfigurationError("fine cost needs controls on the fine grid")
    samples = per_sample_cost(spec, fine_partition, trajectory, controls)
    value = float(samples.mean())
    m = samples.shape[0]
    mc_std = float(samples.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return value, mc_std


# ---------------------------------------------------------------------------
# control transport between partitions


def project_control_to_partition(fine: ControlPath, coarse: Partition) -> ControlPath:
    """Left-endpoint restriction of a fine control onto a coarser nested grid."""
    if not fine.partition.refines(coarse):
        raise ConfigurationError("fine control grid does not refine the target grid")
    idx = fine.partition.index_of(coarse.grid[:-1])
    return ControlPath(coarse, fine.values[idx].copy())


def embed_control_to_partition(coarse: ControlPath, fine: Partition) -> ControlPath:
    """Hold coarse interval values constant across the fine sub-steps."""
    if not fine.refines(coarse.partition):
        raise ConfigurationError("target grid does not refine the control grid")
    lefts = fine.grid[:-1]
    which = np.searchsorted(coarse.partition.grid, lefts + 1e-12 * max(1.0, fine.horizon), side="right") - 1
    which = np.clip(which, 0, coarse.partition.n_steps - 1)
    return ControlPath(fine, coarse.values[which].copy())


def h2_distance(a: ControlPath, b: ControlPath) -> float:
    """sqrt(particle average of sum_i |a_i - b_i|^2 h_i)."""
    if not np.array_equal(a.partition.grid, b.partition.grid):
        raise ConfigurationError("h2_distance needs matching partitions")
    if a.values.shape != b.values.shape:
        raise ConfigurationError("h2_distance needs matching particle counts")
    diff2 = np.sum((a.values - b.values) ** 2, axis=2)  # (N, M)
    per_particle = a.partition.steps @ diff2
    return float(np.sqrt(per_particle.mean()))


def wasserstein2_1d(p: EmpiricalMeasure, q: EmpiricalMeasure) -> float:
    """Exact W2 between equal-size scalar clouds (sorted coupling)."""
    if p.size != q.size:
        raise ConfigurationError("wasserstein2_1d needs equal sample counts")
    if p.dim != 1 or q.dim != 1:
        raise ConfigurationError("wasserstein2_1d is for scalar samples")
    a = np.sort(p.points[:, 0])
    b = np.sort(q.points[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))
