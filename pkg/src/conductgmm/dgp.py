"""Seeded synthetic market data with platform-stable, counter-based streams.

Reproducibility contract
------------------------
Datasets are pure functions of ``(seed, sigma, t, model, truths)``.  The
stream construction is fully specified so another implementation can match
it bit for bit:

* Generator: Philox (4x64 counter-based, the fixed published round
  constants of numpy's ``np.random.Philox``), keyed with the 64-bit seed.
* Stream derivation: ``derive_seed`` chains the SplitMix64 finalizer
  (constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB)
  over the base seed and the index path.
* Uniforms: each variate is ``(k + 0.5) / 2**53`` where ``k`` is a 53-bit
  integer drawn by masking one Philox output (power-of-two ranges never
  reject, so consumption is one word per draw).  Values lie strictly
  inside (0, 1).
* Normals: inverse CDF of the uniform via ``scipy.special.ndtri`` (the
  Cephes rational approximation), so normal draws inherit the platform
  stability of the uniform stream.

Each market consumes one row of an 8-column uniform block, in column order
``(y, z_r, w, r, h_increment, k_increment, eps_d, eps_c)``.  Because rows
are consumed in order, the first ``t`` markets of a larger dataset with the
same seed coincide with the ``t``-market dataset.
"""

from __future__ import annotations

import dataclasses
import io
import math

import numpy as np
from scipy.special import ndtri

from .exceptions import DatasetFormatError, DegenerateDenominatorError
from .model import (
    DEFAULT_TRUE_PARAMS,
    Dataset,
    MarketExogenous,
    MarketObservation,
    ModelKind,
    ParameterVector,
)
from . import equilibrium

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
_SPLITMIX_MUL2 = 0x94D049BB133111EB
_U53 = 1 << 53

DATASET_COLUMNS = (
    "t", "log_p", "log_q", "log_y", "z_r",
    "log_w", "log_r", "log_h", "log_k",
)
ERROR_COLUMNS = ("eps_d", "eps_c")


def splitmix64(state: int) -> int:
    """One SplitMix64 step: advance by the golden-gamma and finalize."""
    state = (state + _SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SPLITMIX_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _SPLITMIX_MUL2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *indices: int) -> int:
    """Pure 64-bit hash of a base seed and an index path.

    Used to assign every replication its own independent stream:
    ``derive_seed(base, cell_index, replication_index)``.
    """
    state = splitmix64(base_seed & _MASK64)
    for index in indices:
        state = splitmix64(state ^ ((index + 1) * _SPLITMIX_GAMMA & _MASK64))
    return state


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed directly with a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def _uniform_open(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms strictly inside (0, 1) with fixed one-word-per-draw consumption."""
    k = rng.integers(0, _U53, size=size, dtype=np.int64)
    return (k + 0.5) / _U53


@dataclasses.dataclass(frozen=True)
class DgpConfig:
    """Inputs of one dataset draw."""

    model: ModelKind
    sigma: float
    t: int
    seed: int
    truths: ParameterVector = DEFAULT_TRUE_PARAMS

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0 (zero expresses the no-noise limit)")


def draw_exogenous(
    rng: np.random.Generator,
    sigma: float,
    model: ModelKind = ModelKind.LOG_LINEAR,
) -> MarketExogenous:
    """Draw one market's exogenous variables and errors.

    The N(0, 1) draw is the *log* demand shifter (a level normal would make
    the log regressor undefined half the time); the rotation instrument is
    U(0, 1), the two cost shifters U(1, 3), the excluded instruments are
    the level shifters plus independent U(0, 1) increments, and both
    errors are N(0, sigma).  The linear model consumes the same draws in
    level space: its demand-shifter field holds exp of the normal draw and
    the cost-shifter fields hold the U(1, 3) levels directly.
    """
    u = _uniform_open(rng, 8)
    return _exog_from_uniforms(u, sigma, model)


def _exog_from_uniforms(u: np.ndarray, sigma: float, model: ModelKind) -> MarketExogenous:
    log_y = float(ndtri(u[0]))
    z_r = float(u[1])
    w = 1.0 + 2.0 * float(u[2])
    r = 1.0 + 2.0 * float(u[3])
    h = w + float(u[4])
    k = r + float(u[5])
    eps_d = sigma * float(ndtri(u[6]))
    eps_c = sigma * float(ndtri(u[7]))
    if model is ModelKind.LOG_LINEAR:
        return MarketExogenous(
            log_y=log_y, z_r=z_r,
            log_w=math.log(w), log_r=math.log(r),
            log_h=math.log(h), log_k=math.log(k),
            eps_d=eps_d, eps_c=eps_c,
        )
    return MarketExogenous(
        log_y=math.exp(log_y), z_r=z_r, log_w=w, log_r=r, log_h=h, log_k=k,
        eps_d=eps_d, eps_c=eps_c,
    )


def generate_market(
    truths: ParameterVector,
    exog: MarketExogenous,
    model: ModelKind = ModelKind.LOG_LINEAR,
) -> MarketObservation:
    """Equilibrium outcome for one market; residuals at ``truths`` recover the drawn errors.

    Log-linear: log quantity from the equilibrium quantity equation, log
    price from the demand equation.  Linear: level quantity from
    ``Q = (alpha0 + alpha3 y + eps_d - gamma0 - gamma2 w - gamma3 r - eps_c)
    / ((1 + theta) s + gamma1)`` and level price from demand.
    """
    s = truths.alpha1 + truths.alpha2 * exog.z_r
    if model is ModelKind.LOG_LINEAR:
        log_q = equilibrium.solve_quantity(truths, exog)
        log_p = truths.alpha0 - s * log_q + truths.alpha3 * exog.log_y + exog.eps_d
        return MarketObservation(exog=exog, log_p=log_p, log_q=log_q)
    denom = (1.0 + truths.theta) * s + truths.gamma1
    if abs(denom) <= equilibrium.SLOPE_EPS:
        raise DegenerateDenominatorError(
            f"(1 + theta) * slope + gamma1 = {denom!r} is numerically zero"
        )
    q = (
        truths.alpha0
        + truths.alpha3 * exog.log_y
        + exog.eps_d
        - truths.gamma0
        - truths.gamma2 * exog.log_w
        - truths.gamma3 * exog.log_r
        - exog.eps_c
    ) / denom
    p = truths.alpha0 - s * q + truths.alpha3 * exog.log_y + exog.eps_d
    return MarketObservation(exog=exog, log_p=p, log_q=q)


def generate_dataset(config: DgpConfig) -> Dataset:
    """Draw ``config.t`` markets from the stream keyed by ``config.seed``."""
    rng = make_rng(config.seed)
    u = _uniform_open(rng, (config.t, 8))
    markets = []
    for i in range(config.t):
        exog = _exog_from_uniforms(u[i], config.sigma, config.model)
        markets.append(generate_market(config.truths, exog, config.model))
    return Dataset(model=config.model, markets=tuple(markets))


def _format(value: float) -> str:
    return repr(float(value))


def write_dataset_csv(dataset: Dataset, path_or_file, with_errors: bool = False) -> None:
    """Write a dataset in the canonical CSV layout.

    The first line is a ``# model=...`` comment tagging the functional
    form; floats use round-trip-exact decimal formatting.  Error columns
    are emitted only on request and are never read back by estimation.
    """
    if isinstance(path_or_file, (str, bytes)):
        with open(path_or_file, "w", newline="") as fh:
            _write_dataset(dataset, fh, with_errors)
    else:
        _write_dataset(dataset, path_or_file, with_errors)


def _write_dataset(dataset: Dataset, fh, with_errors: bool) -> None:
    columns = DATASET_COLUMNS + (ERROR_COLUMNS if with_errors else ())
    fh.write(f"# model={dataset.model.value}\n")
    fh.write(",".join(columns) + "\n")
    for i, market in enumerate(dataset.markets):
        e = market.exog
        row = [
            str(i),
            _format(market.log_p), _format(market.log_q),
            _format(e.log_y), _format(e.z_r),
            _format(e.log_w), _format(e.log_r),
            _format(e.log_h), _format(e.log_k),
        ]
        if with_errors:
            row += [_format(e.eps_d), _format(e.eps_c)]
        fh.write(",".join(row) + "\n")


def read_dataset_csv(path_or_file) -> Dataset:
    """Read a dataset written by ``write_dataset_csv``.

    Missing error columns are stored as zeros; estimation never consumes
    them.
    """
    if isinstance(path_or_file, (str, bytes)):
        with open(path_or_file, "r", newline="") as fh:
            return _read_dataset(fh)
    return _read_dataset(path_or_file)


def _read_dataset(fh) -> Dataset:
    model = ModelKind.LOG_LINEAR
    header = None
    line_no = 0
    markets = []
    for raw in fh:
        line_no += 1
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tag = line[1:].strip()
            if tag.startswith("model="):
                value = tag.split("=", 1)[1]
                try:
                    model = ModelKind(value)
                except ValueError:
                    raise DatasetFormatError(f"unknown model tag {value!r}") from None
            continue
        if header is None:
            header = tuple(line.split(","))
            if header not in (DATASET_COLUMNS, DATASET_COLUMNS + ERROR_COLUMNS):
                raise DatasetFormatError(f"unexpected header {header!r}")
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetFormatError(
                f"line {line_no}: expected {len(header)} fields, got {len(parts)}"
            )
        try:
            values = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DatasetFormatError(f"line {line_no}: {exc}") from None
        with_errors = len(header) > len(DATASET_COLUMNS)
        eps_d, eps_c = (values[8], values[9]) if with_errors else (0.0, 0.0)
        try:
            exog = MarketExogenous(
                log_y=values[2], z_r=values[3],
                log_w=values[4], log_r=values[5],
                log_h=values[6], log_k=values[7],
                eps_d=eps_d, eps_c=eps_c,
            )
            markets.append(MarketObservation(exog=exog, log_p=values[0], log_q=values[1]))
        except ValueError as exc:
            raise DatasetFormatError(f"line {line_no}: {exc}") from None
    if header is None or not markets:
        raise DatasetFormatError("no data rows found")
    return Dataset(model=model, markets=tuple(markets))


def dataset_to_csv_string(dataset: Dataset, with_errors: bool = False) -> str:
    buf = io.StringIO()
    write_dataset_csv(dataset, buf, with_errors=with_errors)
    return buf.getvalue()
