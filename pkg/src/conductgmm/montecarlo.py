"""Replication harness: per-cell bias, RMSE, and convergence statistics.

A study sweeps the sample sizes of one (model, estimator, sigma) cell.
Every replication owns a private dataset stream derived as
``derive_seed(base_seed, size_index, replication_index)``; the estimator
does not enter the derivation, so panels that differ only in the estimator
run on identical data.  Aggregation is an ordered fold over replication
indices, so results are bit-identical regardless of worker count.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math

import numpy as np

from .dgp import DgpConfig, derive_seed, generate_dataset
from .exceptions import EmptySampleError
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
from .solver import EstimateResult, Termination, estimate


@dataclasses.dataclass(frozen=True)
class ReplicationRecord:
    """Summary of one replication (kept lightweight for pickling)."""

    size_index: int
    replication: int
    estimates: tuple[float, ...]
    converged: bool
    termination: str
    objective: float


@dataclasses.dataclass(frozen=True)
class CellResult:
    """Statistics for one (model, estimator, T, sigma) cell."""

    model: ModelKind
    estimator: EstimatorKind
    t: int
    sigma: float
    replications: int
    n_converged: int
    converged_pct: float
    bias: tuple[float, ...]
    rmse: tuple[float, ...]


@dataclasses.dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    truths: ParameterVector
    cells: tuple[CellResult, ...]


def bias_rmse(
    estimates,
    truths: ParameterVector,
) -> dict[str, tuple[float, float]]:
    """Per-parameter mean error and root-mean-square error."""
    estimates = list(estimates)
    if not estimates:
        raise EmptySampleError("no estimates to aggregate")
    mat = np.array([e.to_array() for e in estimates])
    errors = mat - truths.to_array()
    bias = errors.mean(axis=0)
    rmse = np.sqrt((errors ** 2).mean(axis=0))
    return {name: (float(b), float(r)) for name, b, r in zip(PARAM_NAMES, bias, rmse)}


def convergence_rate(results) -> float:
    """Percentage of runs flagged converged."""
    results = list(results)
    if not results:
        raise EmptySampleError("no results to aggregate")
    return 100.0 * sum(1 for r in results if r.converged) / len(results)


@dataclasses.dataclass(frozen=True)
class _Task:
    model: ModelKind
    estimator: EstimatorKind
    t: int
    sigma: float
    seed: int
    truths: ParameterVector
    solver: SolverConfig
    size_index: int
    replication: int


def _run_replication(task: _Task) -> ReplicationRecord:
    dataset = generate_dataset(DgpConfig(
        model=task.model, sigma=task.sigma, t=task.t,
        seed=task.seed, truths=task.truths,
    ))
    result = estimate(dataset, task.estimator, task.solver)
    return ReplicationRecord(
        size_index=task.size_index,
        replication=task.replication,
        estimates=tuple(float(v) for v in result.xi_hat.to_array()),
        converged=result.converged,
        termination=result.termination.value,
        objective=result.objective_value,
    )


def _resolve_solver(config: StudyConfig, truths: ParameterVector) -> SolverConfig:
    if config.solver.start.from_truths:
        return dataclasses.replace(config.solver, start=StartPoint.true_values(truths))
    return config.solver


def run_study(
    config: StudyConfig,
    truths: ParameterVector = DEFAULT_TRUE_PARAMS,
    *,
    workers: int = 1,
    converged_only: bool = True,
) -> StudyResult:
    """Run every (T, replication) of a study and aggregate the statistics.

    ``converged_only`` restricts bias/RMSE to converged replications (the
    convergence-rate denominator always counts everything); non-converged
    runs are recorded, never fatal.  Deterministic given the config,
    including under parallel execution.
    """
    solver = _resolve_solver(config, truths)
    tasks = [
        _Task(
            model=config.model, estimator=config.estimator, t=t,
            sigma=config.sigma, seed=derive_seed(config.base_seed, si, r),
            truths=truths, solver=solver, size_index=si, replication=r,
        )
        for si, t in enumerate(config.sample_sizes)
        for r in range(config.replications)
    ]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_replication, tasks, chunksize=4))
    else:
        records = [_run_replication(task) for task in tasks]

    cells = []
    for si, t in enumerate(config.sample_sizes):
        cell_records = [r for r in records if r.size_index == si]
        n_total = len(cell_records)
        kept = [r for r in cell_records if r.converged] if converged_only else cell_records
        n_converged = sum(1 for r in cell_records if r.converged)
        if kept:
            stats = bias_rmse(
                [ParameterVector.from_array(np.array(r.estimates)) for r in kept],
                truths,
            )
            bias = tuple(stats[name][0] for name in PARAM_NAMES)
            rmse = tuple(stats[name][1] for name in PARAM_NAMES)
        else:
            bias = tuple(math.nan for _ in PARAM_NAMES)
            rmse = tuple(math.nan for _ in PARAM_NAMES)
        cells.append(CellResult(
            model=config.model, estimator=config.estimator, t=t,
            sigma=config.sigma, replications=n_total,
            n_converged=n_converged,
            converged_pct=100.0 * n_converged / n_total,
            bias=bias, rmse=rmse,
        ))
    return StudyResult(config=config, truths=truths, cells=tuple(cells))


STUDY_CSV_HEADER = "model,estimator,T,sigma,param,bias,rmse,converged_pct,replications"


def study_csv_rows(result: StudyResult) -> list[str]:
    rows = []
    for cell in result.cells:
        for i, name in enumerate(PARAM_NAMES):
            rows.append(
                f"{cell.model.value},{cell.estimator.value},{cell.t},{repr(cell.sigma)},"
                f"{name},{repr(cell.bias[i])},{repr(cell.rmse[i])},"
                f"{repr(cell.converged_pct)},{cell.replications}"
            )
    return rows


def write_study_csv(results, path_or_file) -> None:
    """Emit one or more study results as a long-format CSV."""
    if isinstance(results, StudyResult):
        results = [results]
    lines = [STUDY_CSV_HEADER]
    for result in results:
        lines.extend(study_csv_rows(result))
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_file, (str, bytes)):
        with open(path_or_file, "w", newline="") as fh:
            fh.write(text)
    else:
        path_or_file.write(text)


def render_study_table(result: StudyResult) -> str:
    """Aligned text panel: parameter rows, one Bias/RMSE column pair per T."""
    width = 10
    header = f"{result.config.model.value} / {result.config.estimator.value} / sigma={result.config.sigma}"
    lines = [header, "-" * max(len(header), 9 + 2 * width * len(result.cells))]
    cols = "".join(f"{'Bias':>{width}}{'RMSE':>{width}}" for _ in result.cells)
    lines.append(f"{'':9}{cols}")
    for i, name in enumerate(PARAM_NAMES):
        row = f"{name:9}"
        for cell in result.cells:
            row += f"{cell.bias[i]:>{width}.3f}{cell.rmse[i]:>{width}.3f}"
        lines.append(row)
    conv = f"{'conv %':9}"
    size = f"{'T':9}"
    for cell in result.cells:
        conv += f"{'':{width}}{cell.converged_pct:>{width}.3f}"
        size += f"{'':{width}}{cell.t:>{width}d}"
    lines.append(conv)
    lines.append(size)
    return "\n".join(lines)
