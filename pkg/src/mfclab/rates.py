"""Convergence-rate and regularity experiments at desk scale.

Value and control error ladders over refining partitions with log-log
order fits, plus the time-regularity statistic of the solved control.
Common random numbers couple all levels of a ladder through one
refinement-consistent Brownian store per seed, so level differences are
not masked by Monte Carlo noise.

Rate acceptance is phrased as bound compliance plus slope-at-least
thresholds: the underlying estimates are upper bounds, and smooth
instances legitimately converge faster than the guaranteed orders.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ConvergenceError, InsufficientDataError
from .fbsde import FeedbackFlow, RiccatiFlow, picard_solve, riccati_oracle_lq1d
from .model import Partition, ProblemSpec
from .optim import feedback_control_path, projected_gradient_descent
from .sim import BrownianStore, ControlPath, embed_control_to_partition, h2_distance

__all__ = [
    "RateLevel",
    "RateReport",
    "HolderReport",
    "fit_loglog_slope",
    "value_rate_experiment",
    "control_rate_experiment",
    "holder_experiment",
]


@dataclass
class RateLevel:
    n_steps: int
    mesh: float
    value: float
    mc_std: float
    error: float
    wall_ms: float
    gap_certificate: float
    usable: bool

    def to_json(self):
        return {
            "n_steps": self.n_steps, "mesh": self.mesh, "value": self.value,
            "mc_std": self.mc_std, "error": self.error, "wall_ms": self.wall_ms,
            "gap_certificate": self.gap_certificate, "usable": self.usable,
        }


@dataclass
class RateReport:
    metric: str
    levels: list
    reference_value: Optional[float]
    reference_provenance: str
    fitted_order: Optional[float]
    fitted_order_std: Optional[float]
    seeds: list
    flags: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "metric": self.metric,
            "levels": [lv.to_json() for lv in self.levels],
            "reference_value": self.reference_value,
            "reference_provenance": self.reference_provenance,
            "fitted_order": self.fitted_order,
            "fitted_order_std": self.fitted_order_std,
            "seeds": list(self.seeds),
            "flags": self.flags,
        }


@dataclass
class HolderReport:
    p: float
    pairs: list  # (s, t, statistic)
    max_statistic: float
    refined_max_statistic: Optional[float] = None
    stable: Optional[bool] = None

    def to_json(self):
        return {
            "p": self.p,
            "pairs": [[float(s), float(t), float(v)] for s, t, v in self.pairs],
            "max_statistic": self.max_statistic,
            "refined_max_statistic": self.refined_max_statistic,
            "stable": self.stable,
        }


def fit_loglog_slope(points):
    """Weighted least-squares slope of log(error) against log(mesh).

    points: iterable of (mesh, error, weight); weights should be inverse
    variances of log(error) (delta method: (error/mc_std)^2).  Returns
    (order, std_error); raises InsufficientDataError below 3 points.
    """
    pts = [(m, e, w) for m, e, w in points]
    if len(pts) < 3:
        raise InsufficientDataError(f"need at least 3 points, got {len(pts)}")
    if any(e <= 0 for _, e, _ in pts):
        raise ConfigurationError("log-log fit needs positive errors")
    x = np.log([m for m, _, _ in pts])
    y = np.log([e for _, e, _ in pts])
    w = np.asarray([max(wi, 1e-300) for _, _, wi in pts])
    wm_x = np.sum(w * x) / np.sum(w)
    wm_y = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - wm_x) ** 2)
    sxy = np.sum(w * (x - wm_x) * (y - wm_y))
    slope = sxy / sxx
    intercept = wm_y - slope * wm_x
    resid = y - (intercept + slope * x)
    dof = len(pts) - 2
    s2 = float(np.sum(w * resid**2) / dof) if dof > 0 else 0.0
    return float(slope), float(math.sqrt(max(s2, 0.0) / sxx))


def _check_ladder(ladder):
    ladder = sorted(int(n) for n in ladder)
    if len(ladder) < 1 or ladder[0] < 1:
        raise ConfigurationError("ladder must contain positive step counts")
    for a, b in zip(ladder, ladder[1:]):
        if b % a != 0 or b <= a:
            raise ConfigurationError("ladder must be strictly refining (each level divides the next)")
    return ladder


def _warm_start(spec, partition, store, riccati, picard_kwargs):
    """Feedback warm start: Riccati flow for LQ, Picard field otherwise."""
    if spec.kind == "lq1d" and riccati is not None:
        return feedback_control_path(spec, partition, store, RiccatiFlow(spec, riccati))
    try:
        sol = picard_solve(spec, partition, store, **(picard_kwargs or {}))
    except ConvergenceError:
        return None
    from .feedback import make_feedback_map

    flow = FeedbackFlow(spec, make_feedback_map(spec), sol.field)
    return feedback_control_path(spec, partition, store, flow)


def value_rate_experiment(
    spec: ProblemSpec,
    ladder,
    n_particles: int,
    seeds,
    mode: str = "discrete-state",
    fine_factor: int = 4,
    gap_fraction: float = 0.01,
    max_iters: int = 200,
    warm_start: bool = True,
    picard_kwargs: Optional[dict] = None,
    cache_bytes: float = 1.5e9,
) -> RateReport:
    """Value-error ladder against the Riccati oracle (or a finest-grid solve).

    mode "discrete-state": optimize the Euler-discretized problem at each
    level.  mode "continuous-state": optimize coarse piecewise-constant
    controls driving the fine-grid dynamics (surrogate for the
    continuous-time state), which converges to the reference from above.
    Each level is solved to a gap certificate of roughly gap_fraction
    times the expected level error.  Levels whose Monte Carlo noise
    exceeds half the measured error are excluded from the order fit.
    """
    if mode not in ("discrete-state", "continuous-state"):
        raise ConfigurationError(f"unknown value-rate mode {mode!r}")
    ladder = _check_ladder(ladder)
    seeds = [int(s) for s in seeds]
    horizon = spec.horizon
    n_max = ladder[-1]

    riccati = None
    ref_std = 0.0
    if spec.kind == "lq1d":
        mean0 = float(np.mean(spec.initial_law.sample(0, 4)[:, 0]))
        var0 = _initial_variance(spec)
        riccati = riccati_oracle_lq1d(spec.lq, horizon, mean0, var0)
        reference = riccati.value
        provenance = "riccati-oracle"
        base_steps = fine_factor * n_max if mode == "continuous-state" else n_max
    else:
        base_steps = fine_factor * n_max
        reference = None
        provenance = "finest-grid-extrapolation"

    fine = Partition.uniform(base_steps, horizon) if mode == "continuous-state" else None

    per_seed_values = {n: [] for n in ladder}
    per_seed_mc = {n: [] for n in ladder}
    per_seed_cert = {n: [] for n in ladder}
    wall = {n: 0.0 for n in ladder}
    ref_values = []

    for seed in seeds:
        store = BrownianStore(seed, n_particles, spec.d, horizon, base_steps,
                              cache_bytes=cache_bytes)
        if reference is None:
            ref_part = Partition.uniform(base_steps, horizon)
            init = _warm_start(spec, ref_part, store, riccati, picard_kwargs) if warm_start else None
            res = projected_gradient_descent(
                spec, ref_part, store, eps_target=gap_fraction * (horizon / base_steps) ** 0.5,
                max_iters=max_iters, init=init,
            )
            ref_values.append(res.cost)
            ref_std = max(ref_std, res.mc_std)
        scale = None
        for n in ladder:
            part = Partition.uniform(n, horizon)
            mesh = part.mesh
            expected = (scale if scale is not None else max(1.0, abs(reference or 1.0))) * math.sqrt(mesh)
            eps = gap_fraction * expected
            init = _warm_start(spec, part, store, riccati, picard_kwargs) if warm_start else None
            t0 = time.perf_counter()
            res = projected_gradient_descent(
                spec, part, store, eps_target=eps, max_iters=max_iters, init=init,
                fine_partition=fine,
            )
            wall[n] += (time.perf_counter() - t0) * 1000.0
            per_seed_values[n].append(res.cost)
            per_seed_mc[n].append(res.mc_std)
            per_seed_cert[n].append(res.gap_certificate)
            if scale is None and reference is not None:
                e0 = abs(res.cost - reference)
                scale = max(e0, 3.0 * res.mc_std) / math.sqrt(mesh)

    if reference is None:
        reference = float(np.mean(ref_values))

    levels = []
    for n in ladder:
        vals = per_seed_values[n]
        value = float(np.mean(vals))
        mc = float(np.sqrt(np.sum(np.square(per_seed_mc[n]))) / len(vals))
        err = abs(value - reference)
        levels.append(RateLevel(
            n_steps=n, mesh=horizon / n, value=value, mc_std=mc, error=err,
            wall_ms=wall[n], gap_certificate=float(np.max(per_seed_cert[n])),
            usable=err > 0 and mc <= err / 2,
        ))

    return _finish_value_report(
        "value-continuous" if mode == "continuous-state" else "value-discrete",
        levels, reference, provenance, seeds, ref_std, spec,
    )


def _initial_variance(spec):
    sample = spec.initial_law.sample(0, 50_000)[:, 0]
    v = float(sample.var())
    return v if v > 1e-14 else 0.0


def _finish_value_report(metric, levels, reference, provenance, seeds, ref_std, spec):
    flags = {}
    usable = [lv for lv in levels if lv.usable]
    flags["exact"] = all(lv.error == 0.0 for lv in levels)
    flags["inconclusive"] = (not flags["exact"]) and len(usable) < 3
    fitted = fitted_std = None
    if flags["exact"]:
        pass
    elif len(usable) >= 3:
        pts = [
            (lv.mesh, lv.error, (lv.error / lv.mc_std) ** 2 if lv.mc_std > 0 else 1e6)
            for lv in usable
        ]
        fitted, fitted_std = fit_loglog_slope(pts)
    if usable:
        c0 = usable[0].error / math.sqrt(usable[0].mesh)
        flags["bound_ok"] = all(
            lv.error <= 2.0 * c0 * math.sqrt(lv.mesh) + 1e-15 for lv in usable
        )
        errs = [lv.error for lv in usable]
        flags["monotone_after_filter"] = all(a > b for a, b in zip(errs, errs[1:]))
    if metric == "value-continuous":
        flags["ordering_ok"] = all(
            reference <= lv.value + 3.0 * (lv.mc_std + ref_std) for lv in levels
        )
    flags["compact_action"] = spec.action.bound_radius is not None
    return RateReport(
        metric=metric, levels=levels, reference_value=reference,
        reference_provenance=provenance, fitted_order=fitted,
        fitted_order_std=fitted_std, seeds=seeds, flags=flags,
    )


def control_rate_experiment(
    spec: ProblemSpec,
    ladder,
    n_particles: int,
    seeds,
    eps_schedule: Optional[Callable[[float], float]] = None,
    fine_factor: int = 4,
    max_iters: int = 200,
    picard_kwargs: Optional[dict] = None,
    cache_bytes: float = 1.5e9,
) -> RateReport:
    """Control-error ladder in the time-weighted L2 distance.

    The reference is the feedback control evaluated along the finest-grid
    optimal flow (Riccati field for LQ, Picard field otherwise).  Each
    level produces an eps-optimal control (eps = mesh^(1/2) by default,
    so the sqrt(eps) term of the error bound matches the mesh^(1/4)
    term), embedded onto the fine grid for the distance.
    """
    ladder = _check_ladder(ladder)
    seeds = [int(s) for s in seeds]
    if eps_schedule is None:
        eps_schedule = math.sqrt
    horizon = spec.horizon
    fine_steps = fine_factor * ladder[-1]
    fine = Partition.uniform(fine_steps, horizon)

    riccati = None
    if spec.kind == "lq1d":
        mean0 = float(np.mean(spec.initial_law.sample(0, 4)[:, 0]))
        riccati = riccati_oracle_lq1d(spec.lq, horizon, mean0, _initial_variance(spec))
        provenance = "riccati-oracle"
    else:
        provenance = "finest-grid-extrapolation"

    per_seed_err = {n: [] for n in ladder}
    per_seed_cert = {n: [] for n in ladder}
    wall = {n: 0.0 for n in ladder}

    for seed in seeds:
        store = BrownianStore(seed, n_particles, spec.d, horizon, fine_steps,
                              cache_bytes=cache_bytes)
        if riccati is not None:
            reference_control = feedback_control_path(
                spec, fine, store, RiccatiFlow(spec, riccati)
            )
        else:
            sol = picard_solve(spec, fine, store, **(picard_kwargs or {}))
            from .feedback import make_feedback_map

            reference_control = feedback_control_path(
                spec, fine, store, FeedbackFlow(spec, make_feedback_map(spec), sol.field)
            )
        for n in ladder:
            part = Partition.uniform(n, horizon)
            eps = float(eps_schedule(part.mesh))
            init = _warm_start(spec, part, store, riccati, picard_kwargs)
            t0 = time.perf_counter()
            res = projected_gradient_descent(
                spec, part, store, eps_target=eps, max_iters=max_iters, init=init,
            )
            embedded = embed_control_to_partition(res.control, fine)
            err = h2_distance(embedded, reference_control)
            wall[n] += (time.perf_counter() - t0) * 1000.0
            per_seed_err[n].append(err)
            per_seed_cert[n].append(res.gap_certificate)

    levels = []
    for n in ladder:
        errs = per_seed_err[n]
        err = float(np.mean(errs))
        spread = float(np.std(errs) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
        levels.append(RateLevel(
            n_steps=n, mesh=horizon / n, value=err, mc_std=spread, error=err,
            wall_ms=wall[n], gap_certificate=float(np.max(per_seed_cert[n])),
            usable=err > 0,
        ))

    flags = {}
    usable = [lv for lv in levels if lv.usable]
    flags["exact"] = all(lv.error == 0.0 for lv in levels)
    fitted = fitted_std = None
    if not flags["exact"] and len(usable) >= 3:
        pts = [(lv.mesh, lv.error, 1.0) for lv in usable]
        fitted, fitted_std = fit_loglog_slope(pts)
    if usable:
        c_fits = [lv.error / lv.mesh**0.25 for lv in usable]
        c0 = c_fits[0]
        flags["bound_ok"] = all(
            lv.error <= 2.0 * c0 * lv.mesh**0.25 + 1e-15 for lv in usable
        )
        flags["cfit_stable"] = max(c_fits) <= 4.0 * min(c_fits)
    flags["compact_action"] = spec.action.bound_radius is not None
    return RateReport(
        metric="control", levels=levels, reference_value=None,
        reference_provenance=provenance, fitted_order=fitted,
        fitted_order_std=fitted_std, seeds=seeds, flags=flags,
    )


def holder_experiment(
    spec: ProblemSpec,
    fine_steps: int,
    n_particles: int,
    p: float = 2.0,
    seed: int = 0,
    max_pair_level: int = 6,
    refine_check: bool = True,
    picard_kwargs: Optional[dict] = None,
) -> HolderReport:
    """Normalized time-increment statistic of the solved control.

    For dyadic pairs (s, t) the statistic is
    E[ sup_{s<=r<=t} |a_r - a_s|^p ]^(1/p) / ((1 + |xi0|_p) (t-s)^(1/2)),
    computed pathwise over the particle ensemble of the fine-grid solve.
    With refine_check the grid is refined 2x under the same noise; a max
    statistic moving by <= 25% indicates a genuine square-root modulus.
    """
    if fine_steps & (fine_steps - 1) != 0:
        raise ConfigurationError("holder experiment expects a power-of-two grid")
    horizon = spec.horizon
    base = 2 * fine_steps if refine_check else fine_steps
    store = BrownianStore(seed, n_particles, spec.d, horizon, base)
    norm0 = 1.0 + spec.initial_law.norm_lp(p)

    def statistics(n_steps):
        part = Partition.uniform(n_steps, horizon)
        sol = picard_solve(spec, part, store, **(picard_kwargs or {}))
        alpha = sol.controls  # (N+1, M, k)
        pairs = []
        levels = range(1, min(max_pair_level, int(math.log2(n_steps))) + 1)
        for lv in levels:
            block = n_steps // 2**lv
            for j in range(2**lv):
                i0, i1 = j * block, (j + 1) * block
                seg = alpha[i0 : i1 + 1]
                sup = np.max(
                    np.linalg.norm(seg - seg[0][None], axis=2), axis=0
                )  # (M,)
                stat = float(np.mean(sup**p) ** (1.0 / p))
                s, t = part.grid[i0], part.grid[i1]
                pairs.append((float(s), float(t), stat / (norm0 * math.sqrt(t - s))))
        return pairs

    pairs = statistics(fine_steps)
    max_stat = max(v for _, _, v in pairs)
    refined_max = None
    stable = None
    if refine_check:
        refined_pairs = statistics(2 * fine_steps)
        refined_max = max(v for _, _, v in refined_pairs)
        stable = abs(refined_max - max_stat) <= 0.25 * max(max_stat, 1e-12)
    return HolderReport(
        p=p, pairs=pairs, max_statistic=float(max_stat),
        refined_max_statistic=refined_max, stable=stable,
    )
