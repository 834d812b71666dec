#!/usr/bin/env python3
"""
Q-Brownian motion on the truncated Hilbert space.
Trace-class covariance spectra, reproducible increment streams, Hilbert-Schmidt
diffusion operators and Monte Carlo checks of the Ito isometry and BDG bound.
"""

import re
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from hilbert_core import (DimensionMismatchError, HilbertVec, InvalidInputError,
                          mean_and_stderr, norms)

logger = logging.getLogger(__name__)

# Stream ids keep noise used for different purposes from overlapping.
STREAM_SOLVER = 0
STREAM_CHECKS = 1

_FAMILY_PATTERN = re.compile(r'^\s*(\w+)\s*\(\s*([^)]*)\)\s*$')


def parse_family(expression: str) -> tuple:
    """Split a call-like family string such as 'geometric(0.5)' into (name, args)."""
    match = _FAMILY_PATTERN.match(str(expression))
    if not match:
        raise InvalidInputError(f"cannot parse family expression {expression!r}")
    name, raw_args = match.group(1), match.group(2)
    try:
        args = [float(a) for a in raw_args.split(',') if a.strip()]
    except ValueError:
        raise InvalidInputError(f"non-numeric argument in {expression!r}") from None
    return name, args


class QSpectrum:
    """Eigenvalues lambda_1 >= lambda_2 >= ... >= 0 of the covariance Q."""

    def __init__(self, lambdas: Sequence[float]):
        values = np.array(lambdas, dtype=float).reshape(-1)
        if values.size < 1:
            raise InvalidInputError("a spectrum needs at least one eigenvalue")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("eigenvalues must be finite")
        if np.any(values < 0):
            raise InvalidInputError(f"eigenvalues must be non-negative, got {values.tolist()}")
        if np.any(np.diff(values) > 0):
            raise InvalidInputError(f"eigenvalues must be non-increasing, got {values.tolist()}")
        assert np.isfinite(values.sum()), "trace of Q must be finite"
        values.setflags(write=False)
        self.lambdas = values

    @property
    def dim(self) -> int:
        return self.lambdas.size

    @classmethod
    def geometric(cls, ratio: float, dim: int) -> "QSpectrum":
        """lambda_n = ratio^n for n = 1..N."""
        if not 0 < ratio <= 1:
            raise InvalidInputError(f"geometric ratio must be in (0, 1], got {ratio}")
        return cls(ratio ** np.arange(1, dim + 1))

    @classmethod
    def polynomial(cls, exponent: float, dim: int) -> "QSpectrum":
        """lambda_n = n^(-exponent) for n = 1..N."""
        if exponent < 0:
            raise InvalidInputError(f"polynomial exponent must be >= 0, got {exponent}")
        return cls(np.arange(1, dim + 1, dtype=float) ** (-exponent))

    @classmethod
    def from_config(cls, spec: Union[str, List[float], Dict], dim: int) -> "QSpectrum":
        """Explicit list, 'geometric(r)', 'polynomial(e)' or {'lambdas': [...]}."""
        if isinstance(spec, dict):
            spec = spec.get('lambdas', spec.get('family'))
        if isinstance(spec, (list, tuple)):
            spectrum = cls(spec)
            if spectrum.dim != dim:
                raise DimensionMismatchError(f"spectrum has {spectrum.dim} eigenvalues, N = {dim}")
            return spectrum
        name, args = parse_family(spec)
        if name == 'geometric' and len(args) == 1:
            return cls.geometric(args[0], dim)
        if name == 'polynomial' and len(args) == 1:
            return cls.polynomial(args[0], dim)
        raise InvalidInputError(f"unknown spectrum family {spec!r}")

    def __repr__(self) -> str:
        return f"QSpectrum({self.lambdas.tolist()})"


def trace(spec: QSpectrum) -> float:
    """Tr(Q) = sum of eigenvalues."""
    return float(np.sum(spec.lambdas))


@dataclass(frozen=True)
class WienerIncrement:
    dvalue: HilbertVec
    dt: float


def path_stream(seed: int, path: int, stream: int = STREAM_SOLVER) -> np.random.Generator:
    """Counter-based generator keyed by (seed, path, stream).

    Draws start at counter zero, so the block for a path is a pure function of
    its key regardless of which worker produces it or in what order.
    """
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF,
                    ((int(stream) & 0xFFFFFFFF) << 32) | (int(path) & 0xFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_increment(spec: QSpectrum, dt: float, rng: np.random.Generator) -> WienerIncrement:
    """One increment W(t+dt) - W(t): component n is sqrt(lambda_n dt) xi_n."""
    if dt < 0:
        raise InvalidInputError(f"increment length must be >= 0, got {dt}")
    xi = rng.standard_normal(spec.dim)
    return WienerIncrement(HilbertVec(np.sqrt(spec.lambdas * dt) * xi), float(dt))


def sample_increments(spec: QSpectrum, dt: float, n_steps: int, seed: int,
                      paths: Sequence[int], stream: int = STREAM_SOLVER) -> np.ndarray:
    """Increment blocks for the given path indices, shape (len(paths), n_steps, N).

    Row k of a path's block is the increment over [t_k, t_{k+1}].
    """
    if dt < 0:
        raise InvalidInputError(f"increment length must be >= 0, got {dt}")
    scale = np.sqrt(spec.lambdas * dt)
    block = np.empty((len(paths), n_steps, spec.dim))
    for row, path in enumerate(paths):
        block[row] = path_stream(seed, path, stream).standard_normal((n_steps, spec.dim))
    return block * scale


class DiffusionOperator:
    """Phi in L_2^0, stored as an N x N matrix or, when diagonal, as its diagonal."""

    def __init__(self, matrix: Union[Sequence, np.ndarray], diagonal: bool = False):
        values = np.array(matrix, dtype=float)
        if diagonal:
            values = values.reshape(-1)
        elif values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DimensionMismatchError(f"diffusion matrix must be square, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("diffusion operator entries must be finite")
        values.setflags(write=False)
        self._values = values
        self.diagonal = diagonal

    @classmethod
    def identity(cls, dim: int) -> "DiffusionOperator":
        return cls(np.ones(dim), diagonal=True)

    @classmethod
    def zero(cls, dim: int) -> "DiffusionOperator":
        return cls(np.zeros(dim), diagonal=True)

    @property
    def dim(self) -> int:
        return self._values.shape[0]

    def as_matrix(self) -> np.ndarray:
        return np.diag(self._values) if self.diagonal else self._values.copy()

    def apply(self, dw: np.ndarray) -> np.ndarray:
        """Phi applied to increments on the last axis."""
        if np.shape(dw)[-1] != self.dim:
            raise DimensionMismatchError(f"operator dimension {self.dim}, increment {np.shape(dw)[-1]}")
        if self.diagonal:
            return dw * self._values
        return dw @ self._values.T


def hs_norm(op: DiffusionOperator, spec: QSpectrum) -> float:
    """||Phi Q^{1/2}||_HS = sqrt(sum_{m,n} Phi_{m,n}^2 lambda_n)."""
    if op.dim != spec.dim:
        raise DimensionMismatchError(f"operator dimension {op.dim}, spectrum {spec.dim}")
    squares = op.as_matrix() ** 2
    return float(np.sqrt(np.sum(squares * spec.lambdas[np.newaxis, :])))


def hs_norms(matrices: np.ndarray, spec: QSpectrum) -> np.ndarray:
    """Row-wise L_2^0 norms of a stack of (..., N, N) operator matrices."""
    return np.sqrt(np.sum(matrices ** 2 * spec.lambdas, axis=(-2, -1)))


@dataclass(frozen=True)
class IsometryCheck:
    mc: float
    analytic: float
    zscore: float
    stderr: float


def _zscore(mc: float, analytic: float, stderr: float) -> float:
    if stderr > 0:
        return abs(mc - analytic) / stderr
    return 0.0 if np.isclose(mc, analytic, rtol=1e-12, atol=0.0) else float('inf')


def ito_isometry_check(op: DiffusionOperator, spec: QSpectrum, T: float, paths: int,
                       seed: int) -> IsometryCheck:
    """E||int_0^T Phi dW||^2 by Monte Carlo against T ||Phi||_{L_2^0}^2.

    For a constant integrand the integral equals Phi W(T), so one increment of
    length T per path is exact.
    """
    if T <= 0:
        raise InvalidInputError(f"horizon T must be positive, got {T}")
    w_T = sample_increments(spec, T, 1, seed, range(paths), stream=STREAM_CHECKS)[:, 0, :]
    mc, stderr = mean_and_stderr(norms(op.apply(w_T)) ** 2)
    analytic = T * hs_norm(op, spec) ** 2
    check = IsometryCheck(mc, analytic, _zscore(mc, analytic, stderr), stderr)
    logger.info(f"Ito isometry: mc={check.mc:.6g} analytic={check.analytic:.6g} z={check.zscore:.3f}")
    return check


def bdg_constant(p: float, configured: Optional[float] = None) -> float:
    """C_p of the BDG bound; default (p(p-1)/2)^{p/2} for p > 2 and 1 for p = 2."""
    if p < 2:
        raise InvalidInputError(f"BDG constant needs p >= 2, got {p}")
    if configured is not None:
        if configured <= 0:
            raise InvalidInputError(f"configured C_p must be positive, got {configured}")
        return float(configured)
    if p == 2:
        return 1.0
    return float((p * (p - 1) / 2) ** (p / 2))


@dataclass(frozen=True)
class BdgCheck:
    terminal_moment: float
    terminal_stderr: float
    sup_moment: float
    sup_stderr: float
    bound: float
    ratio: float
    sup_ratio: float
    margin: float


def bdg_check(op: DiffusionOperator, spec: QSpectrum, T: float, p: float, paths: int,
              seed: int, n_steps: int = 100, Cp: Optional[float] = None) -> BdgCheck:
    """Monte Carlo BDG check for a constant integrand.

    ``ratio`` is E||int_0^T Phi dW||^p / (T ||Phi||^2)^{p/2} (3 for p = 4 Gaussian)
    and ``margin`` is C_p / ratio; sup_ratio is the running-maximum analogue.
    """
    if T <= 0:
        raise InvalidInputError(f"horizon T must be positive, got {T}")
    constant = bdg_constant(p, Cp)
    quadratic_variation = T * hs_norm(op, spec) ** 2
    increments = sample_increments(spec, T / n_steps, n_steps, seed, range(paths), stream=STREAM_CHECKS)
    integral = np.cumsum(op.apply(increments), axis=1)
    running = norms(integral)
    terminal, terminal_err = mean_and_stderr(running[:, -1] ** p)
    sup_value, sup_err = mean_and_stderr(np.max(running, axis=1) ** p)
    scale = quadratic_variation ** (p / 2)
    if scale == 0:
        return BdgCheck(terminal, terminal_err, sup_value, sup_err, 0.0, 0.0, 0.0, float('inf'))
    ratio, sup_ratio = terminal / scale, sup_value / scale
    check = BdgCheck(terminal, terminal_err, sup_value, sup_err, constant * scale,
                     ratio, sup_ratio, constant / ratio if ratio > 0 else float('inf'))
    logger.info(f"BDG p={p:g}: terminal ratio={ratio:.4f} sup ratio={sup_ratio:.4f} C_p={constant:g}")
    return check


def noise_fidelity(spec: QSpectrum, dt: float, samples: int, seed: int,
                   times: Sequence[float] = (0.5, 1.0, 2.0)) -> Dict:
    """Covariance, E||W(t)||^2 and disjoint-increment checks for one spectrum.

    Returns per-check statistics with max z-scores (deviation / stderr).
    """
    n_modes = spec.dim
    increments = sample_increments(spec, dt, 2, seed, range(samples), stream=STREAM_CHECKS)
    first, second = increments[:, 0, :], increments[:, 1, :]

    products = first[:, :, np.newaxis] * first[:, np.newaxis, :]
    target = dt * np.diag(spec.lambdas)
    cov_z = np.zeros((n_modes, n_modes))
    cov_estimate = np.zeros((n_modes, n_modes))
    for m in range(n_modes):
        for n in range(n_modes):
            estimate, stderr = mean_and_stderr(products[:, m, n])
            cov_estimate[m, n] = estimate
            cov_z[m, n] = _zscore(estimate, target[m, n], stderr)

    cross = np.sum(first * second, axis=1)
    cross_mean, cross_err = mean_and_stderr(cross)

    w_moments = []
    for t in times:
        n_sub = max(1, int(round(t / dt)))
        # W(t) as a sum of n_sub increments, drawn independently of the covariance block.
        block = sample_increments(spec, t / n_sub, n_sub, seed + 1, range(samples), stream=STREAM_CHECKS)
        w_t = np.sum(block, axis=1)
        estimate, stderr = mean_and_stderr(norms(w_t) ** 2)
        w_moments.append({'t': float(t), 'estimate': estimate, 'stderr': stderr,
                          'analytic': t * trace(spec),
                          'zscore': _zscore(estimate, t * trace(spec), stderr)})

    return {
        'covariance': cov_estimate,
        'covariance_max_z': float(np.max(cov_z)),
        'cross_covariance': cross_mean,
        'cross_covariance_z': _zscore(cross_mean, 0.0, cross_err),
        'w_moments': w_moments,
    }
