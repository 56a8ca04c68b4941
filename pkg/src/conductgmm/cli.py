"""Command-line front end.

Commands: ``simulate`` (write a synthetic dataset CSV), ``estimate`` (run
one estimator on a dataset CSV), ``mc`` (Monte Carlo study), ``delta-curve``
(sample the fixed-point curve), and ``diagnose`` (per-iterate compensation
report of an unconstrained run).

Exit codes: 0 success (``estimate``: converged), 1 usage, 2 parse error,
3 solver failure, 4 I/O error.  The ``CONDUCTGMM_SEED`` environment
variable overrides the default seed when no flag is given.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys

import numpy as np

from . import montecarlo
from .dgp import DgpConfig, generate_dataset, read_dataset_csv, write_dataset_csv
from .equilibrium import sample_delta_curve
from .exceptions import ConductGmmError, ConfigError, DatasetFormatError
from .model import (
    DEFAULT_TRUE_PARAMS,
    EstimatorKind,
    ModelKind,
    PARAM_NAMES,
    ParameterVector,
    SolverConfig,
    StartPoint,
    StudyConfig,
)
from .solver import Termination, diagnose_divergence, estimate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_SOLVER = 3
EXIT_IO = 4

SEED_ENV_VAR = "CONDUCTGMM_SEED"
DEFAULT_SEED = 20240100
SCHEMA_VERSION = "1"

_CONFIG_SCHEMA = {
    "meta": {"schema_version"},
    "study": {
        "model", "estimator", "sample_sizes", "sigma", "replications", "base_seed",
    },
    "solver": {
        "max_iterations", "tol_stationarity", "tol_constraint", "strict_slack",
        "start", "start_values",
    },
    "dgp": {"truths"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _parse_params(text: str) -> ParameterVector:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != len(PARAM_NAMES):
        raise ConfigError(f"expected {len(PARAM_NAMES)} parameter values, got {len(parts)}")
    try:
        return ParameterVector.from_array(np.array([float(p) for p in parts]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Config file handling (INI-style sections, unknown keys rejected)
# ---------------------------------------------------------------------------

def read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values: dict = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[f"{section}.{key}"] = parser[section][key]
    version = values.get("meta.schema_version")
    if version is None:
        raise ConfigError(f"{path}: missing [meta] schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r}")
    return values


def write_config_file(path: str, study: StudyConfig, truths: ParameterVector) -> None:
    """Write a study configuration; reading it back reproduces every field."""
    start = study.solver.start
    lines = [
        "[meta]",
        f"schema_version = {SCHEMA_VERSION}",
        "",
        "[study]",
        f"model = {study.model.value}",
        f"estimator = {study.estimator.value}",
        f"sample_sizes = {', '.join(str(t) for t in study.sample_sizes)}",
        f"sigma = {study.sigma!r}",
        f"replications = {study.replications}",
        f"base_seed = {study.base_seed}",
        "",
        "[solver]",
        f"max_iterations = {study.solver.max_iterations}",
        f"tol_stationarity = {study.solver.tol_stationarity!r}",
        f"tol_constraint = {study.solver.tol_constraint!r}",
        f"strict_slack = {study.solver.strict_slack!r}",
        f"start = {'truths' if start.from_truths else 'explicit'}",
    ]
    if not start.from_truths:
        lines.append(
            "start_values = " + ", ".join(repr(getattr(start.values, n)) for n in PARAM_NAMES)
        )
    lines += [
        "",
        "[dgp]",
        "truths = " + ", ".join(repr(getattr(truths, n)) for n in PARAM_NAMES),
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def _config_get(values: dict, key: str, cast, default):
    raw = values.get(key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def _study_from_config(values: dict, args) -> tuple[StudyConfig, ParameterVector]:
    """Assemble a study from config-file values with flag overrides on top."""
    def pick(flag_value, key, cast, default):
        if flag_value is not None:
            return flag_value
        return _config_get(values, key, cast, default)

    model = pick(args.model and ModelKind(args.model), "study.model", ModelKind, ModelKind.LOG_LINEAR)
    estimator = pick(
        args.estimator and EstimatorKind(args.estimator),
        "study.estimator", EstimatorKind, EstimatorKind.CONSTRAINED,
    )
    sample_sizes = pick(
        args.sample_sizes and _parse_int_list(args.sample_sizes),
        "study.sample_sizes", _parse_int_list, (100,),
    )
    sigma = pick(args.sigma, "study.sigma", float, 1.0)
    replications = pick(args.replications, "study.replications", int, 200)
    base_seed = pick(args.base_seed, "study.base_seed", int, _default_seed())

    start_kind = _config_get(values, "solver.start", str, "truths")
    if start_kind not in ("truths", "explicit"):
        raise ConfigError(f"solver start must be 'truths' or 'explicit', got {start_kind!r}")
    truths = _config_get(values, "dgp.truths", _parse_params, DEFAULT_TRUE_PARAMS)
    if start_kind == "explicit":
        raw = values.get("solver.start_values")
        if raw is None:
            raise ConfigError("solver start = explicit requires start_values")
        start = StartPoint.explicit(_parse_params(raw))
    else:
        start = StartPoint.true_values(truths)
    solver = SolverConfig(
        max_iterations=_config_get(values, "solver.max_iterations", int, 3000),
        tol_stationarity=_config_get(values, "solver.tol_stationarity", float, 1e-6),
        tol_constraint=_config_get(values, "solver.tol_constraint", float, 1e-8),
        strict_slack=_config_get(values, "solver.strict_slack", float, 1e-6),
        start=start,
    )
    try:
        study = StudyConfig(
            model=model, estimator=estimator, sample_sizes=tuple(sample_sizes),
            sigma=sigma, replications=replications, base_seed=base_seed,
            solver=solver,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return study, truths


def _parse_int_list(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    parts = [p for p in str(text).replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


# ---------------------------------------------------------------------------
# Presets mirroring the simulation panels
# ---------------------------------------------------------------------------

_PANEL_SIZES = (100, 200, 1000, 1500)
_LINEAR_SIZES = (50, 100, 200, 1000)

PRESETS: dict[str, list[tuple[ModelKind, EstimatorKind, float, tuple[int, ...]]]] = {
    "table1a": [(ModelKind.LOG_LINEAR, EstimatorKind.UNCONSTRAINED, 1.0, _PANEL_SIZES)],
    "table1b": [(ModelKind.LOG_LINEAR, EstimatorKind.CONSTRAINED, 1.0, _PANEL_SIZES)],
    "table1c": [(ModelKind.LOG_LINEAR, EstimatorKind.ADHOC_MPEC, 1.0, _PANEL_SIZES)],
    "table1": [
        (ModelKind.LOG_LINEAR, EstimatorKind.UNCONSTRAINED, 1.0, _PANEL_SIZES),
        (ModelKind.LOG_LINEAR, EstimatorKind.CONSTRAINED, 1.0, _PANEL_SIZES),
        (ModelKind.LOG_LINEAR, EstimatorKind.ADHOC_MPEC, 1.0, _PANEL_SIZES),
    ],
    "table3": [
        (ModelKind.LOG_LINEAR, EstimatorKind.UNCONSTRAINED, 0.5, _PANEL_SIZES),
        (ModelKind.LOG_LINEAR, EstimatorKind.CONSTRAINED, 0.5, _PANEL_SIZES),
    ],
    "table4": [
        (ModelKind.LOG_LINEAR, EstimatorKind.UNCONSTRAINED, 2.0, _PANEL_SIZES),
        (ModelKind.LOG_LINEAR, EstimatorKind.CONSTRAINED, 2.0, _PANEL_SIZES),
    ],
    "table5": [
        (ModelKind.LINEAR, EstimatorKind.UNCONSTRAINED, s, _LINEAR_SIZES)
        for s in (0.5, 1.0, 2.0)
    ],
    "table6": [
        (ModelKind.LINEAR, EstimatorKind.CONSTRAINED, s, _LINEAR_SIZES)
        for s in (0.5, 1.0, 2.0)
    ],
    "table7": [
        (ModelKind.LOG_LINEAR, EstimatorKind.ADHOC_MPEC, s, _PANEL_SIZES)
        for s in (0.5, 1.0, 2.0)
    ],
}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    truths = _parse_params(args.truths) if args.truths else DEFAULT_TRUE_PARAMS
    config = DgpConfig(
        model=ModelKind(args.model), sigma=args.sigma, t=args.t,
        seed=seed, truths=truths,
    )
    dataset = generate_dataset(config)
    if args.out == "-":
        write_dataset_csv(dataset, sys.stdout, with_errors=args.with_errors)
    else:
        write_dataset_csv(dataset, args.out, with_errors=args.with_errors)
    return EXIT_OK


def _solver_config_from_args(args) -> SolverConfig:
    if args.start and args.start != "truths":
        start = StartPoint.explicit(_parse_params(args.start))
    else:
        start = StartPoint.true_values(DEFAULT_TRUE_PARAMS)
    return SolverConfig(
        max_iterations=args.max_iterations,
        tol_stationarity=args.tol_stationarity,
        tol_constraint=args.tol_constraint,
        strict_slack=args.strict_slack,
        start=start,
    )


def _cmd_estimate(args) -> int:
    dataset = read_dataset_csv(args.dataset)
    config = _solver_config_from_args(args)
    kind = EstimatorKind(args.estimator)
    demand = tuple(args.demand_instruments.split(",")) if args.demand_instruments else None
    supply = tuple(args.supply_instruments.split(",")) if args.supply_instruments else None
    result = estimate(
        dataset, kind, config, keep_trace=args.trace is not None,
        demand_instruments=demand, supply_instruments=supply,
    )
    print(f"model: {dataset.model.value}  estimator: {kind.value}  markets: {len(dataset)}")
    for name in PARAM_NAMES:
        print(f"  {name:8} = {getattr(result.xi_hat, name):+.10g}")
    print(f"objective   = {result.objective_value:.10g}")
    print(f"kkt residual= {result.kkt_residual:.4g}")
    print(f"iterations  = {result.iterations}")
    print(f"converged   = {result.converged} ({result.termination.value})")
    report = result.constraint_report
    print(
        "constraint slacks: "
        f"conduct={report.conduct:.4g} demand_slope={report.demand_slope:.4g} "
        f"cost_slope={report.cost_slope:.4g} existence={report.existence:.4g}"
    )
    if report.max_equality_violation is not None:
        print(f"max equality violation = {report.max_equality_violation:.4g}")
    if args.trace is not None:
        with open(args.trace, "w", newline="") as fh:
            fh.write("iteration,objective,kkt_residual,theta,gamma0,min_slack\n")
            for row in result.trace:
                fh.write(
                    f"{row.iteration},{row.objective!r},{row.grad_norm!r},"
                    f"{row.params[8]!r},{row.params[4]!r},{row.min_slack!r}\n"
                )
    return EXIT_OK if result.converged else EXIT_SOLVER


def _cmd_mc(args) -> int:
    values = read_config_file(args.config) if args.config else {"meta.schema_version": SCHEMA_VERSION}
    study, truths = _study_from_config(values, args)
    workers = args.threads if args.threads else (os.cpu_count() or 1)

    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r} (choose from {sorted(PRESETS)})")
        replications = args.replications if args.replications is not None else 1000
        studies = [
            dataclasses.replace(
                study, model=model, estimator=estimator, sigma=sigma,
                sample_sizes=sizes, replications=replications,
            )
            for model, estimator, sigma, sizes in PRESETS[args.preset]
        ]
    else:
        studies = [study]

    results = []
    for sub in studies:
        result = montecarlo.run_study(sub, truths=truths, workers=workers)
        results.append(result)
        print(montecarlo.render_study_table(result))
        print()
    if args.out:
        montecarlo.write_study_csv(results, args.out)
    return EXIT_OK


def _cmd_delta_curve(args) -> int:
    from .model import MarketExogenous

    params = _parse_params(args.params) if args.params else DEFAULT_TRUE_PARAMS
    exog = MarketExogenous(
        log_y=args.log_y, z_r=args.z_r, log_w=args.log_w, log_r=args.log_r,
        log_h=args.log_h, log_k=args.log_k, eps_d=args.eps_d, eps_c=args.eps_c,
    )
    if args.grid_points < 2 or args.grid_max <= args.grid_min or args.grid_min <= 0:
        raise ConfigError("grid requires 0 < min < max and at least 2 points")
    grid = np.geomspace(args.grid_min, args.grid_max, args.grid_points)
    samples = sample_delta_curve(params, exog, grid)
    lines = ["p,term1,term2,delta"]
    lines += [f"{s.p!r},{s.term1!r},{s.term2!r},{s.delta!r}" for s in samples]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    truths = _parse_params(args.truths) if args.truths else DEFAULT_TRUE_PARAMS
    dataset = generate_dataset(DgpConfig(
        model=ModelKind.LOG_LINEAR, sigma=args.sigma, t=args.t,
        seed=seed, truths=truths,
    ))
    config = SolverConfig(start=StartPoint.true_values(truths))
    result = estimate(dataset, EstimatorKind.UNCONSTRAINED, config, keep_trace=True)
    rows = diagnose_divergence(result.trace, dataset)
    lines = ["iteration,theta,gamma0,max_log_margin"]
    lines += [f"{r.iteration},{r.theta!r},{r.gamma0!r},{r.max_log_margin!r}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    print(
        f"final theta = {result.xi_hat.theta:+.6g}, gamma0 = {result.xi_hat.gamma0:+.6g}, "
        f"converged = {result.converged}",
        file=sys.stderr,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conduct-gmm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset CSV")
    p.add_argument("--t", type=int, default=100, help="number of markets")
    p.add_argument("--sigma", type=float, default=1.0, help="error standard deviation")
    p.add_argument("--seed", type=int, default=None, help="stream seed")
    p.add_argument("--model", choices=[m.value for m in ModelKind], default="loglinear")
    p.add_argument("--truths", default=None, help="nine comma-separated truth values")
    p.add_argument("--with-errors", action="store_true", help="include drawn errors as columns")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="estimate parameters from a dataset CSV")
    p.add_argument("dataset", help="dataset CSV path")
    p.add_argument("--estimator", choices=[e.value for e in EstimatorKind],
                   default="constrained")
    p.add_argument("--max-iterations", type=int, default=3000)
    p.add_argument("--tol-stationarity", type=float, default=1e-6)
    p.add_argument("--tol-constraint", type=float, default=1e-8)
    p.add_argument("--strict-slack", type=float, default=1e-6)
    p.add_argument("--start", default="truths",
                   help="'truths' or nine comma-separated start values")
    p.add_argument("--demand-instruments", default=None,
                   help="comma-separated demand instrument columns")
    p.add_argument("--supply-instruments", default=None,
                   help="comma-separated supply instrument columns")
    p.add_argument("--trace", default=None, help="write per-iterate trace CSV here")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("mc", help="run a Monte Carlo study")
    p.add_argument("--config", default=None, help="study configuration file")
    p.add_argument("--preset", default=None, help=f"one of {sorted(PRESETS)}")
    p.add_argument("--model", choices=[m.value for m in ModelKind], default=None)
    p.add_argument("--estimator", choices=[e.value for e in EstimatorKind], default=None)
    p.add_argument("--sample-sizes", default=None, help="comma-separated market counts")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--base-seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out", default=None, help="write long-format study CSV here")
    p.set_defaults(func=_cmd_mc)

    p = sub.add_parser("delta-curve", help="sample the fixed-point curve to CSV")
    p.add_argument("--params", default=None, help="nine comma-separated parameter values")
    p.add_argument("--log-y", type=float, default=0.0)
    p.add_argument("--z-r", type=float, default=0.0)
    p.add_argument("--log-w", type=float, default=0.0)
    p.add_argument("--log-r", type=float, default=0.0)
    p.add_argument("--log-h", type=float, default=0.0)
    p.add_argument("--log-k", type=float, default=0.0)
    p.add_argument("--eps-d", type=float, default=0.0)
    p.add_argument("--eps-c", type=float, default=0.0)
    p.add_argument("--grid-min", type=float, default=1e-2)
    p.add_argument("--grid-max", type=float, default=1e8)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=_cmd_delta_curve)

    p = sub.add_parser("diagnose", help="trace an unconstrained run's divergence mechanism")
    p.add_argument("--t", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--truths", default=None)
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=_cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConductGmmError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
