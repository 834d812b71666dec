#!/usr/bin/env python3
"""
Truncated Hilbert space value types and Monte Carlo p-th moment estimation.
Elements of H are coefficient vectors on the first N orthonormal basis modes.
"""

import math
import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import sem

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 8
CSV_SIGNIFICANT_DIGITS = 15


class InvalidInputError(ValueError):
    """Raised when an operation receives input outside its preconditions."""


class DimensionMismatchError(InvalidInputError):
    """Raised when vectors, operators, spectra or grids disagree in shape."""


class BlowUpError(InvalidInputError):
    """Raised when every path of an ensemble went non-finite, leaving nothing to estimate."""

    def __init__(self, invalid: int):
        self.invalid = int(invalid)
        super().__init__(f"all {self.invalid} paths blew up; no valid paths to estimate from")


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


class HilbertVec:
    """Immutable coefficient vector on the basis e_1..e_N."""

    __slots__ = ("_coeffs",)

    def __init__(self, coeffs: Union[Iterable[float], np.ndarray]):
        values = np.array(coeffs, dtype=float).reshape(-1)
        if values.size < 1:
            raise InvalidInputError("HilbertVec needs at least one mode (N >= 1)")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"HilbertVec entries must be finite, got {values.tolist()}")
        self._coeffs = _frozen(values)

    @classmethod
    def zeros(cls, dim: int) -> "HilbertVec":
        return cls(np.zeros(dim))

    @classmethod
    def basis(cls, index: int, dim: int) -> "HilbertVec":
        """Unit vector e_{index+1} (0-based index)."""
        if not 0 <= index < dim:
            raise DimensionMismatchError(f"basis index {index} outside 0..{dim - 1}")
        values = np.zeros(dim)
        values[index] = 1.0
        return cls(values)

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @property
    def dim(self) -> int:
        return self._coeffs.size

    def _check_dim(self, other: "HilbertVec") -> None:
        if other.dim != self.dim:
            raise DimensionMismatchError(f"dimension {self.dim} vs {other.dim}")

    def __add__(self, other: "HilbertVec") -> "HilbertVec":
        self._check_dim(other)
        return HilbertVec(self._coeffs + other._coeffs)

    def __sub__(self, other: "HilbertVec") -> "HilbertVec":
        self._check_dim(other)
        return HilbertVec(self._coeffs - other._coeffs)

    def __mul__(self, scalar: float) -> "HilbertVec":
        return HilbertVec(self._coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "HilbertVec":
        return HilbertVec(-self._coeffs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HilbertVec):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self._coeffs, other._coeffs))

    def __hash__(self) -> int:
        return hash(self._coeffs.tobytes())

    def __repr__(self) -> str:
        return f"HilbertVec({self._coeffs.tolist()})"


def norm(v: HilbertVec) -> float:
    """Euclidean norm of the truncated coefficient vector."""
    if not isinstance(v, HilbertVec):
        v = HilbertVec(v)
    return float(np.sqrt(np.sum(v.coeffs * v.coeffs)))


def norms(states: np.ndarray) -> np.ndarray:
    """Row-wise norms over the last axis of a state array."""
    return np.sqrt(np.sum(states * states, axis=-1))


def mean_and_stderr(values: np.ndarray) -> Tuple[float, float]:
    """Compensated mean and standard error (ddof=1) of a 1-d sample."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise InvalidInputError("cannot average an empty sample")
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    estimate = math.fsum(values.tolist()) / values.size
    if values.size == 1:
        return estimate, 0.0
    stderr = float(sem(values, ddof=1))
    if not np.isfinite(stderr):
        stderr = 0.0
    return estimate, stderr


class PathEnsemble:
    """P sample paths of an H-valued process on a shared uniform grid.

    ``paths`` has shape (P, len(grid), N). Paths flagged invalid (numerical
    blow-up) are kept for bookkeeping but excluded from every estimator.
    """

    GRID_TOLERANCE = 1e-9

    def __init__(self, grid: np.ndarray, paths: np.ndarray, seed: int,
                 valid: Optional[np.ndarray] = None):
        grid = np.asarray(grid, dtype=float).reshape(-1)
        paths = np.asarray(paths, dtype=float)
        if paths.ndim != 3:
            raise DimensionMismatchError(f"paths must be (P, K, N), got shape {paths.shape}")
        if paths.shape[0] < 1:
            raise InvalidInputError("a path ensemble needs at least one path")
        if paths.shape[1] != grid.size:
            raise DimensionMismatchError(f"grid has {grid.size} points but paths have {paths.shape[1]}")
        if paths.shape[2] < 1:
            raise InvalidInputError("paths need at least one mode")
        if grid.size > 1:
            steps = np.diff(grid)
            if np.any(steps <= 0):
                raise InvalidInputError("grid must be strictly increasing")
            if np.max(np.abs(steps - steps[0])) > self.GRID_TOLERANCE * max(1.0, abs(steps[0])):
                raise InvalidInputError("grid must be uniform")
        if valid is None:
            valid = np.all(np.isfinite(paths.reshape(paths.shape[0], -1)), axis=1)
        valid = np.asarray(valid, dtype=bool).reshape(-1)
        if valid.size != paths.shape[0]:
            raise DimensionMismatchError("valid mask length must equal the number of paths")

        self.grid = _frozen(grid.copy())
        self.paths = _frozen(paths)
        self.valid = _frozen(valid.copy())
        self.seed = int(seed)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    @property
    def dt(self) -> float:
        if self.grid.size < 2:
            return 0.0
        return float(self.grid[1] - self.grid[0])

    @property
    def invalid_count(self) -> int:
        return int(self.n_paths - np.count_nonzero(self.valid))

    def states(self, t_index: int) -> np.ndarray:
        """(P_valid, N) array of states at one grid index."""
        if not -self.grid.size <= t_index < self.grid.size:
            raise InvalidInputError(f"t_index {t_index} outside grid of length {self.grid.size}")
        return self.paths[self.valid, t_index, :]

    def index_of(self, t: float) -> int:
        """Grid index of time t; t must lie on the grid."""
        position = (t - self.grid[0]) / self.dt if self.dt > 0 else 0.0
        index = int(round(position))
        if abs(position - index) > self.GRID_TOLERANCE * max(1.0, abs(position)) or not 0 <= index < self.grid.size:
            raise InvalidInputError(f"time {t} is not on the grid")
        return index

    def difference(self, other: "PathEnsemble") -> "PathEnsemble":
        """Pathwise difference of two ensembles sharing grid and path count."""
        if self.paths.shape != other.paths.shape or not np.array_equal(self.grid, other.grid):
            raise DimensionMismatchError("ensembles differ in grid, path count or dimension")
        return PathEnsemble(self.grid, self.paths - other.paths, self.seed,
                            valid=self.valid & other.valid)


class MomentSeries:
    """Time-indexed Monte Carlo estimates of E||.||^p with standard errors."""

    def __init__(self, grid: np.ndarray, estimate: np.ndarray, stderr: np.ndarray, p: float):
        grid = np.asarray(grid, dtype=float).reshape(-1)
        estimate = np.asarray(estimate, dtype=float).reshape(-1)
        stderr = np.asarray(stderr, dtype=float).reshape(-1)
        if not grid.size == estimate.size == stderr.size:
            raise DimensionMismatchError("grid, estimate and stderr must have equal length")
        if p < 2:
            raise InvalidInputError(f"moment order p must be >= 2, got {p}")
        if np.any(estimate < 0) or np.any(stderr < 0):
            raise InvalidInputError("moment estimates and standard errors must be non-negative")
        self.grid = _frozen(grid)
        self.estimate = _frozen(estimate)
        self.stderr = _frozen(stderr)
        self.p = float(p)

    def __len__(self) -> int:
        return self.grid.size

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.grid, 'estimate': self.estimate, 'stderr': self.stderr})


def format_real(value: float) -> str:
    """Positional decimal notation with CSV_SIGNIFICANT_DIGITS significant digits."""
    value = float(value)
    if not np.isfinite(value):
        return str(value)
    if value == 0.0:
        return "0"
    return np.format_float_positional(value, precision=CSV_SIGNIFICANT_DIGITS, unique=False,
                                      fractional=False, trim='k')


def write_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a frame with every float column rendered by format_real; NaN becomes an empty field."""
    path = Path(path)
    out = df.copy()
    for column in out.columns:
        if pd.api.types.is_float_dtype(out[column]):
            out[column] = ["" if np.isnan(x) else format_real(x) for x in out[column]]
    out.to_csv(path, index=False, lineterminator='\n')
    return path


def pth_moment(ens: PathEnsemble, t_index: int, p: float) -> Tuple[float, float]:
    """Monte Carlo estimate of E||X(t)||^p and its standard error."""
    if p < 2:
        raise InvalidInputError(f"moment order p must be >= 2, got {p}")
    states = ens.states(t_index)
    if states.shape[0] == 0:
        raise BlowUpError(ens.invalid_count)
    return mean_and_stderr(norms(states) ** p)


def moment_series(ens: PathEnsemble, p: float, grid: Optional[np.ndarray] = None) -> MomentSeries:
    """pth_moment at every grid index."""
    if ens.invalid_count:
        logger.warning(f"Moments use {ens.n_paths - ens.invalid_count} of {ens.n_paths} paths "
                       f"({ens.invalid_count} invalid)")
    estimate = np.empty(ens.grid.size)
    stderr = np.empty(ens.grid.size)
    for k in range(ens.grid.size):
        estimate[k], stderr[k] = pth_moment(ens, k, p)
    return MomentSeries(ens.grid if grid is None else grid, estimate, stderr, p)


def sup_pnorm(series: MomentSeries) -> float:
    """Discrete sup norm: max over the grid of estimate^(1/p)."""
    if len(series) == 0:
        raise InvalidInputError("sup_pnorm of an empty series")
    return float(np.max(series.estimate) ** (1.0 / series.p))
