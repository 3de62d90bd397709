"""Batch front end: config ingestion, experiment orchestration, reports.

Config files are INI-style nested tables (stdlib configparser) with
JSON-encoded values, strict about unknown sections and keys.  Artifacts
are staged in a temporary directory and moved into place only on
success, so the output directory never holds a half-written report.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(divergence / nonconvergence / regression trouble), 4 validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DivergenceError,
    InsufficientDataError,
    InvariantViolationError,
    LineSearchError,
    MFCLabError,
    NumericalInputError,
    RegressionError,
)
from .feedback import LQCoefficients, make_feedback_map
from .fbsde import FeedbackFlow, RiccatiFlow, fbsde_residual_check, picard_solve, riccati_oracle_lq1d
from .model import ActionSet, DiracLaw, GaussianLaw, Partition, validate_assumptions
from .optim import feedback_control_path, projected_gradient_descent
from .problems import BUILTIN_NAMES, make_example1, make_example2, make_lq1d
from .rates import control_rate_experiment, holder_experiment, value_rate_experiment
from .sim import BrownianStore, cost_discrete, simulate_discrete

__all__ = ["RunConfig", "parse_config", "run", "main"]

_LQ_KEYS = (
    "q", "qbar", "r", "c", "b2", "gamma", "beta", "b1", "b0",
    "sigma0", "sigma1", "sigma2", "qx", "qbarx", "rx", "gx", "gmean",
)

_SCHEMA = {
    "run": {
        "problem": str,
        "seeds": list,
        "particles": int,
        "out": str,
        "threads": int,
        "experiments": list,
    },
    "problem": {
        **{k: float for k in _LQ_KEYS},
        "horizon": float,
        "kappa_mean": float,
        "kappa_nu": float,
        "huber": float,
        "initial": str,
        "initial_mean": float,
        "initial_std": float,
        "action": str,
        "action_lo": float,
        "action_hi": float,
        "action_center": float,
        "action_radius": float,
    },
    "partition": {
        "ladder": list,
        "fine_factor": int,
        "holder_steps": int,
        "solve_steps": int,
    },
    "optimizer": {
        "eps_target": float,
        "max_iters": int,
        "warm_start": bool,
        "control_mode": str,
    },
    "fbsde": {
        "damping": float,
        "tol": float,
        "max_iters": int,
        "basis": str,
        "tol_inner": float,
    },
    "validation": {
        "probes": int,
        "seed": int,
    },
}

_DEFAULTS = {
    "run": {
        "problem": "lq1d",
        "seeds": [12345],
        "particles": 20000,
        "out": "out",
        "threads": 1,
        "experiments": ["value-discrete", "value-continuous", "control"],
    },
    "problem": {},
    "partition": {"ladder": [4, 8, 16, 32, 64], "fine_factor": 4,
                  "holder_steps": 64, "solve_steps": 64},
    "optimizer": {"eps_target": 1e-6, "max_iters": 200, "warm_start": True,
                  "control_mode": "per-particle"},
    "fbsde": {"damping": 0.5, "tol": 1e-7, "max_iters": 200, "basis": "affine",
              "tol_inner": 1e-10},
    "validation": {"probes": 50, "seed": 0},
}

_EXPERIMENTS = ("value-discrete", "value-continuous", "control")


@dataclass
class RunConfig:
    """Validated run configuration (sections -> key -> value)."""

    sections: dict = field(default_factory=dict)

    def get(self, section, key):
        if key in self.sections.get(section, {}):
            return self.sections[section][key]
        return _DEFAULTS[section][key]

    def has(self, section, key):
        return key in self.sections.get(section, {})

    def validate(self):
        problem = self.get("run", "problem")
        if problem not in BUILTIN_NAMES:
            raise ConfigurationError(
                f"run.problem must be one of {BUILTIN_NAMES}, got {problem!r} "
                "(fully custom problems are built through the Python API)"
            )
        if self.get("run", "particles") < 1:
            raise ConfigurationError("run.particles must be positive")
        if self.get("run", "threads") < 1:
            raise ConfigurationError("run.threads must be positive")
        seeds = self.get("run", "seeds")
        if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigurationError("run.seeds must be a nonempty list of nonnegative ints")
        for exp in self.get("run", "experiments"):
            if exp not in _EXPERIMENTS:
                raise ConfigurationError(
                    f"run.experiments entries must be in {_EXPERIMENTS}, got {exp!r}"
                )
        ladder = self.get("partition", "ladder")
        if not ladder:
            raise ConfigurationError("partition.ladder must be nonempty")
        lad = [int(n) for n in ladder]
        for a, b in zip(lad, lad[1:]):
            if b <= a or b % a != 0:
                raise ConfigurationError(
                    f"partition.ladder must be strictly refining, got {ladder}"
                )
        for key in ("fine_factor", "holder_steps", "solve_steps"):
            if self.get("partition", key) < 1:
                raise ConfigurationError(f"partition.{key} must be positive")
        if self.get("optimizer", "eps_target") <= 0:
            raise ConfigurationError("optimizer.eps_target must be positive")
        if not 0 < self.get("fbsde", "damping") <= 1:
            raise ConfigurationError("fbsde.damping must lie in (0, 1]")
        if self.get("fbsde", "basis") not in ("affine", "quadratic"):
            raise ConfigurationError("fbsde.basis must be 'affine' or 'quadratic'")
        if self.get("optimizer", "control_mode") not in ("per-particle", "common"):
            raise ConfigurationError("optimizer.control_mode must be 'per-particle' or 'common'")
        if self.has("problem", "initial"):
            if self.get("problem", "initial") not in ("dirac", "gaussian"):
                raise ConfigurationError("problem.initial must be 'dirac' or 'gaussian'")
        if self.has("problem", "action"):
            if self.get("problem", "action") not in ("full", "box", "ball"):
                raise ConfigurationError("problem.action must be full|box|ball")
        return self

    def to_text(self) -> str:
        out = io.StringIO()
        for section in sorted(self.sections):
            out.write(f"[{section}]\n")
            for key in sorted(self.sections[section]):
                out.write(f"{key} = {json.dumps(self.sections[section][key])}\n")
            out.write("\n")
        return out.getvalue()


def _coerce(section, key, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    expected = _SCHEMA[section][key]
    if expected is float and isinstance(value, int):
        value = float(value)
    if expected is float and not isinstance(value, float):
        raise ConfigurationError(f"{section}.{key} must be a number, got {raw!r}")
    if expected is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise ConfigurationError(f"{section}.{key} must be an integer, got {raw!r}")
    if expected is bool and not isinstance(value, bool):
        raise ConfigurationError(f"{section}.{key} must be true/false, got {raw!r}")
    if expected is list and not isinstance(value, list):
        raise ConfigurationError(f"{section}.{key} must be a list, got {raw!r}")
    if expected is str and not isinstance(value, str):
        raise ConfigurationError(f"{section}.{key} must be a string, got {raw!r}")
    return value


def parse_config(source) -> RunConfig:
    """Parse and validate a config file path or text; unknown keys are rejected."""
    text = source
    if isinstance(source, (str, os.PathLike)) and os.path.exists(str(source)):
        text = Path(source).read_text()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config parse error: {exc}") from exc
    sections = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(
                f"unknown config section [{section}] (known: {sorted(_SCHEMA)})"
            )
        sections[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(
                    f"unknown config key {section}.{key} "
                    f"(known: {sorted(_SCHEMA[section])})"
                )
            sections[section][key] = _coerce(section, key, raw)
    return RunConfig(sections).validate()


# ---------------------------------------------------------------------------
# spec construction from config


def _initial_law(cfg: RunConfig, default):
    if not (cfg.has("problem", "initial") or cfg.has("problem", "initial_mean")
            or cfg.has("problem", "initial_std")):
        return default
    kind = cfg.get("problem", "initial") if cfg.has("problem", "initial") else "gaussian"
    mean = cfg.get("problem", "initial_mean") if cfg.has("problem", "initial_mean") else 0.0
    if kind == "dirac":
        return DiracLaw([mean])
    std = cfg.get("problem", "initial_std") if cfg.has("problem", "initial_std") else 1.0
    return GaussianLaw([mean], [std])


def _action_set(cfg: RunConfig):
    if not cfg.has("problem", "action"):
        return None
    kind = cfg.get("problem", "action")
    if kind == "full":
        return ActionSet("full")
    if kind == "box":
        lo = cfg.get("problem", "action_lo") if cfg.has("problem", "action_lo") else -np.inf
        hi = cfg.get("problem", "action_hi") if cfg.has("problem", "action_hi") else np.inf
        return ActionSet("box", lo=[lo], hi=[hi])
    center = cfg.get("problem", "action_center") if cfg.has("problem", "action_center") else 0.0
    radius = cfg.get("problem", "action_radius") if cfg.has("problem", "action_radius") else 1.0
    return ActionSet("ball", center=[center], radius=radius)


def build_spec(cfg: RunConfig):
    name = cfg.get("run", "problem")
    horizon = cfg.get("problem", "horizon") if cfg.has("problem", "horizon") else 1.0
    action = _action_set(cfg)
    if name == "lq1d":
        fields = {"qx": 1.0, "gx": 1.0}
        for key in _LQ_KEYS:
            if cfg.has("problem", key):
                fields[key] = cfg.get("problem", key)
        coeffs = LQCoefficients(**fields)
        return make_lq1d(
            coeffs=coeffs, horizon=horizon, action=action,
            initial_law=_initial_law(cfg, None) or DiracLaw([0.0]),
        )
    if name == "example1":
        kwargs = {}
        for key in ("kappa_mean", "huber"):
            if cfg.has("problem", key):
                kwargs[key] = cfg.get("problem", key)
        return make_example1(horizon=horizon, action=action,
                             initial_law=_initial_law(cfg, None), **kwargs)
    kwargs = {}
    for key in ("kappa_mean", "kappa_nu", "gamma"):
        if cfg.has("problem", key):
            kwargs[key] = cfg.get("problem", key)
    return make_example2(horizon=horizon, action=action,
                         initial_law=_initial_law(cfg, None), **kwargs)


# ---------------------------------------------------------------------------
# deterministic serialization helpers


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


class _Stage:
    """Write artifacts to a temp dir; publish atomically on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.tmp = Path(tempfile.mkdtemp(prefix="mfclab-stage-"))
        self.files = []

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text, encoding="utf-8")
        self.files.append(name)

    def publish(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in self.files:
            os.replace(self.tmp / name, self.out_dir / name)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# subcommands


def _rate_csv_rows(report):
    rows = []
    for level, lv in enumerate(report.levels):
        rows.append([
            level, lv.n_steps, lv.mesh, report.metric, lv.value, lv.mc_std, lv.wall_ms,
        ])
    return rows


def _run_validate(cfg, spec, stage):
    report = validate_assumptions(spec, probes=cfg.get("validation", "probes"),
                                  seed=cfg.get("validation", "seed"))
    stage.write("validation.json", _json_text(report.to_json()))
    return report


def _run_solve(cfg, spec, stage, seeds):
    n_steps = cfg.get("partition", "solve_steps")
    part = Partition.uniform(n_steps, spec.horizon)
    store = BrownianStore(seeds[0], cfg.get("run", "particles"), spec.d,
                          spec.horizon, n_steps)
    sol = picard_solve(
        spec, part, store,
        damping=cfg.get("fbsde", "damping"),
        tol=cfg.get("fbsde", "tol"),
        max_iters=cfg.get("fbsde", "max_iters"),
        basis=cfg.get("fbsde", "basis"),
        tol_inner=cfg.get("fbsde", "tol_inner"),
    )
    diagnostics = fbsde_residual_check(sol, spec)
    payload = {"solution": sol.summary(), "diagnostics": diagnostics,
               "n_steps": n_steps, "particles": cfg.get("run", "particles"),
               "seed": seeds[0]}
    if spec.kind == "lq1d":
        mean0 = float(np.mean(spec.initial_law.sample(0, 4)[:, 0]))
        sample = spec.initial_law.sample(0, 50_000)[:, 0]
        rs = riccati_oracle_lq1d(spec.lq, spec.horizon, mean0, float(sample.var()))
        payload["riccati_value"] = rs.value
        payload["riccati_ode_residual"] = rs.ode_residual
    stage.write("solve.json", _json_text(payload))


def _run_optimize(cfg, spec, stage, seeds):
    n_steps = cfg.get("partition", "solve_steps")
    part = Partition.uniform(n_steps, spec.horizon)
    store = BrownianStore(seeds[0], cfg.get("run", "particles"), spec.d,
                          spec.horizon, n_steps)
    init = None
    if cfg.get("optimizer", "warm_start"):
        if spec.kind == "lq1d":
            mean0 = float(np.mean(spec.initial_law.sample(0, 4)[:, 0]))
            sample = spec.initial_law.sample(0, 50_000)[:, 0]
            rs = riccati_oracle_lq1d(spec.lq, spec.horizon, mean0, float(sample.var()))
            init = feedback_control_path(spec, part, store, RiccatiFlow(spec, rs))
        else:
            sol = picard_solve(spec, part, store,
                               damping=cfg.get("fbsde", "damping"),
                               tol=cfg.get("fbsde", "tol"),
                               max_iters=cfg.get("fbsde", "max_iters"),
                               basis=cfg.get("fbsde", "basis"))
            init = feedback_control_path(
                spec, part, store, FeedbackFlow(spec, make_feedback_map(spec), sol.field)
            )
    result = projected_gradient_descent(
        spec, part, store,
        eps_target=cfg.get("optimizer", "eps_target"),
        max_iters=cfg.get("optimizer", "max_iters"),
        init=init,
        control_mode=cfg.get("optimizer", "control_mode"),
    )
    stage.write("optimize.json", _json_text({
        "result": result.to_json(), "n_steps": n_steps, "seed": seeds[0],
    }))


def _run_rates(cfg, spec, stage, seeds):
    ladder = [int(n) for n in cfg.get("partition", "ladder")]
    particles = cfg.get("run", "particles")
    fine_factor = cfg.get("partition", "fine_factor")
    max_iters = cfg.get("optimizer", "max_iters")
    warm = cfg.get("optimizer", "warm_start")
    picard_kwargs = {
        "damping": cfg.get("fbsde", "damping"),
        "tol": cfg.get("fbsde", "tol"),
        "max_iters": cfg.get("fbsde", "max_iters"),
        "basis": cfg.get("fbsde", "basis"),
    }
    jobs = {}
    selected = cfg.get("run", "experiments")

    def launch(pool):
        if "value-discrete" in selected:
            jobs["value-discrete"] = pool.submit(
                value_rate_experiment, spec, ladder, particles, seeds,
                "discrete-state", fine_factor, max_iters=max_iters,
                warm_start=warm, picard_kwargs=picard_kwargs,
            )
        if "value-continuous" in selected:
            jobs["value-continuous"] = pool.submit(
                value_rate_experiment, spec, ladder, particles, seeds,
                "continuous-state", fine_factor, max_iters=max_iters,
                warm_start=warm, picard_kwargs=picard_kwargs,
            )
        if "control" in selected:
            jobs["control"] = pool.submit(
                control_rate_experiment, spec, ladder, particles, seeds,
                fine_factor=fine_factor, max_iters=max_iters,
                picard_kwargs=picard_kwargs,
            )

    with ThreadPoolExecutor(max_workers=cfg.get("run", "threads")) as pool:
        launch(pool)
        reports = {name: job.result() for name, job in jobs.items()}

    rows = []
    summary = {"experiments": {}, "seeds": seeds}
    for name in sorted(reports):
        rep = reports[name]
        rows.extend(_rate_csv_rows(rep))
        summary["experiments"][name] = rep.to_json()
    stage.write("rates.csv", _csv_text(
        ["level", "N", "mesh", "metric", "value", "mc_std", "wall_ms"], rows
    ))
    stage.write("summary.json", _json_text(summary))


def _run_holder(cfg, spec, stage, seeds):
    report = holder_experiment(
        spec, cfg.get("partition", "holder_steps"), cfg.get("run", "particles"),
        seed=seeds[0],
        picard_kwargs={
            "damping": cfg.get("fbsde", "damping"),
            "tol": cfg.get("fbsde", "tol"),
            "max_iters": cfg.get("fbsde", "max_iters"),
            "basis": cfg.get("fbsde", "basis"),
        },
    )
    rows = [[s, t, v] for s, t, v in report.pairs]
    stage.write("holder.csv", _csv_text(["s", "t", "statistic"], rows))
    stage.write("summary.json", _json_text(report.to_json()))


_SUBCOMMANDS = ("validate", "solve", "optimize", "rates", "holder")


def run(subcommand: str, config: RunConfig, out_dir=None, seed=None, threads=None) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    if subcommand not in _SUBCOMMANDS:
        raise ConfigurationError(f"unknown subcommand {subcommand!r}")
    if seed is not None:
        config.sections.setdefault("run", {})["seeds"] = [int(seed)]
    if threads is not None:
        config.sections.setdefault("run", {})["threads"] = int(threads)
    config.validate()
    out = Path(out_dir) if out_dir is not None else Path(config.get("run", "out"))
    seeds = [int(s) for s in config.get("run", "seeds")]
    stage = _Stage(out)
    try:
        spec = build_spec(config)
        report = _run_validate(config, spec, stage)
        if not report.all_passed:
            stage.publish()
            return 4
        if subcommand == "solve":
            _run_solve(config, spec, stage, seeds)
        elif subcommand == "optimize":
            _run_optimize(config, spec, stage, seeds)
        elif subcommand == "rates":
            _run_rates(config, spec, stage, seeds)
        elif subcommand == "holder":
            _run_holder(config, spec, stage, seeds)
        stage.publish()
        return 0
    except ConfigurationError as exc:
        stage.discard()
        _write_error(out, "configuration", exc)
        return 2
    except (ConvergenceError, DivergenceError, RegressionError, LineSearchError,
            NumericalInputError, InvariantViolationError, InsufficientDataError) as exc:
        stage.discard()
        _write_error(out, "numerical", exc)
        return 3


def _write_error(out_dir, kind, exc):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    (out / "error.json").write_text(_json_text(payload), encoding="utf-8")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfc-lab",
        description="Mean-field control laboratory: validate, solve, optimize, rates, holder",
    )
    parser.add_argument("subcommand", choices=_SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to the config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override run.seeds with one seed")
    parser.add_argument("--threads", type=int, default=None, help="worker cap for experiments")
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        code = run(args.subcommand, config, out_dir=args.out, seed=args.seed,
                   threads=args.threads)
    except MFCLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 3
    if code == 4:
        print("validation failed (see validation.json)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
