#!/usr/bin/env python3
"""
Drift f and diffusion g coefficient families with declared Lipschitz constants.

Lipschitz constants follow the p-th power convention of the hypotheses:
E||f(t,X) - f(t,Y)||^p <= L(f) E||X - Y||^p, so a linear map c*x has L = |c|^p.
"""

import math
import logging
from abc import ABC, abstractmethod
from typing import Dict, Optional, Sequence, Union

import numpy as np

from hilbert_core import (DimensionMismatchError, HilbertVec, InvalidInputError, MomentSeries,
                          PathEnsemble, mean_and_stderr, norms)
from qwiener import DiffusionOperator, QSpectrum, hs_norms

logger = logging.getLogger(__name__)

MIN_PROBE_PAIRS = 100
LIPSCHITZ_SLACK = 0.05


def _forcing_direction(direction: Optional[Sequence[float]], dim: int) -> np.ndarray:
    if direction is None:
        unit = np.zeros(dim)
        unit[0] = 1.0
        return unit
    unit = np.array(direction, dtype=float).reshape(-1)
    if unit.size != dim:
        raise DimensionMismatchError(f"forcing direction has {unit.size} entries, N = {dim}")
    return unit


class PeriodicForcing:
    """b(t) = (b0 sin(2 pi t / omega) + b1 exp(-t)) u, omega-periodic up to a decaying transient."""

    def __init__(self, b0: float, b1: float, omega: float, direction: np.ndarray):
        if not omega > 0:
            raise InvalidInputError(f"forcing period omega must be positive, got {omega}")
        self.b0 = float(b0)
        self.b1 = float(b1)
        self.omega = float(omega)
        self.direction = direction

    def amplitude(self, t: float) -> float:
        return self.b0 * math.sin(2 * math.pi * t / self.omega) + self.b1 * math.exp(-t)

    def __call__(self, t: float) -> np.ndarray:
        return self.amplitude(t) * self.direction


class DriftFn(ABC):
    """f(t, x) acting row-wise on (P, N) state arrays."""

    kind = 'drift'

    def __init__(self, dim: int, omega: float, declared_sap: bool = True):
        self.dim = int(dim)
        self.omega = float(omega)
        self.declared_sap = declared_sap

    @abstractmethod
    def evaluate(self, t: float, states: np.ndarray) -> np.ndarray:
        """f(t, x) for every row of ``states``."""

    @abstractmethod
    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        """L(f) for moment order p."""

    def eval(self, t: float, v: HilbertVec) -> HilbertVec:
        if v.dim != self.dim:
            raise DimensionMismatchError(f"drift acts on N={self.dim}, vector has N={v.dim}")
        return HilbertVec(self.evaluate(t, v.coeffs[np.newaxis, :])[0])

    def describe(self) -> Dict:
        return {'kind': self.kind, 'omega': self.omega, 'declared_sap': self.declared_sap}


class AffineDrift(DriftFn):
    """f(t, x) = c x + b(t)."""

    kind = 'affine'

    def __init__(self, c: float, b0: float = 0.0, b1: float = 0.0, omega: float = 1.0,
                 dim: int = 1, direction: Optional[Sequence[float]] = None,
                 declared_sap: bool = True):
        super().__init__(dim, omega, declared_sap)
        self.c = float(c)
        self.forcing = PeriodicForcing(b0, b1, omega, _forcing_direction(direction, dim))

    def evaluate(self, t: float, states: np.ndarray) -> np.ndarray:
        return self.c * states + self.forcing(t)

    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        return abs(self.c) ** p

    def describe(self) -> Dict:
        out = super().describe()
        out.update({'c': self.c, 'b0': self.forcing.b0, 'b1': self.forcing.b1})
        return out


class SaturatingDrift(DriftFn):
    """f(t, x) = kappa tanh(x) componentwise + b(t); |tanh'| <= 1 gives L = kappa^p."""

    kind = 'saturating'

    def __init__(self, kappa: float, b0: float = 0.0, b1: float = 0.0, omega: float = 1.0,
                 dim: int = 1, direction: Optional[Sequence[float]] = None,
                 declared_sap: bool = True):
        super().__init__(dim, omega, declared_sap)
        self.kappa = float(kappa)
        self.forcing = PeriodicForcing(b0, b1, omega, _forcing_direction(direction, dim))

    def evaluate(self, t: float, states: np.ndarray) -> np.ndarray:
        return self.kappa * np.tanh(states) + self.forcing(t)

    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        return abs(self.kappa) ** p

    def describe(self) -> Dict:
        out = super().describe()
        out.update({'kappa': self.kappa, 'b0': self.forcing.b0, 'b1': self.forcing.b1})
        return out


class DiffusionFn(ABC):
    """g(t, x) in L_2^0, evaluated as (P, N, N) matrices or applied to increments."""

    kind = 'diffusion'

    def __init__(self, dim: int, omega: float, declared_sap: bool = True):
        self.dim = int(dim)
        self.omega = float(omega)
        self.declared_sap = declared_sap

    @abstractmethod
    def matrices(self, t: float, states: np.ndarray) -> np.ndarray:
        """g(t, x) as an (P, N, N) stack."""

    @abstractmethod
    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        """L(g) for moment order p."""

    def apply(self, t: float, states: np.ndarray, increments: np.ndarray) -> np.ndarray:
        """g(t, x) dW row by row."""
        return np.einsum('pij,pj->pi', self.matrices(t, states), increments)

    def eval(self, t: float, v: HilbertVec) -> DiffusionOperator:
        if v.dim != self.dim:
            raise DimensionMismatchError(f"diffusion acts on N={self.dim}, vector has N={v.dim}")
        return DiffusionOperator(self.matrices(t, v.coeffs[np.newaxis, :])[0])

    def describe(self) -> Dict:
        return {'kind': self.kind, 'omega': self.omega, 'declared_sap': self.declared_sap}


class ConstantDiffusion(DiffusionFn):
    """Additive noise g(t, x) = Phi_0."""

    kind = 'constant'

    def __init__(self, operator: DiffusionOperator, omega: float = 1.0, declared_sap: bool = True):
        super().__init__(operator.dim, omega, declared_sap)
        self.operator = operator

    @classmethod
    def scalar(cls, sigma: float, dim: int, omega: float = 1.0, declared_sap: bool = True) -> "ConstantDiffusion":
        return cls(DiffusionOperator(np.full(dim, float(sigma)), diagonal=True), omega, declared_sap)

    def matrices(self, t: float, states: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.operator.as_matrix(), (states.shape[0], self.dim, self.dim))

    def apply(self, t: float, states: np.ndarray, increments: np.ndarray) -> np.ndarray:
        return self.operator.apply(increments)

    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        return 0.0

    def describe(self) -> Dict:
        out = super().describe()
        out['operator'] = self.operator.as_matrix().tolist()
        return out


class AffineDiffusion(DiffusionFn):
    """Diagonal g(t, x) = diag(c x_n + sigma + s0 sin(2 pi t / omega)).

    ||g(t,x) - g(t,y)||_{L_2^0}^2 = c^2 sum_n lambda_n (x_n - y_n)^2, so
    L(g) = (|c| sqrt(lambda_1))^p.
    """

    kind = 'affine'

    def __init__(self, c: float, sigma: float = 0.0, s0: float = 0.0, omega: float = 1.0,
                 dim: int = 1, declared_sap: bool = True):
        super().__init__(dim, omega, declared_sap)
        self.c = float(c)
        self.sigma = float(sigma)
        self.s0 = float(s0)

    def _diagonal(self, t: float, states: np.ndarray) -> np.ndarray:
        return self.c * states + self.sigma + self.s0 * math.sin(2 * math.pi * t / self.omega)

    def matrices(self, t: float, states: np.ndarray) -> np.ndarray:
        diagonal = self._diagonal(t, states)
        out = np.zeros(diagonal.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[:, idx, idx] = diagonal
        return out

    def apply(self, t: float, states: np.ndarray, increments: np.ndarray) -> np.ndarray:
        return self._diagonal(t, states) * increments

    def declared_L(self, p: float, spectrum: Optional[QSpectrum] = None) -> float:
        if spectrum is None:
            raise InvalidInputError("L(g) of an affine diffusion depends on the noise spectrum")
        return (abs(self.c) * math.sqrt(spectrum.lambdas[0])) ** p

    def describe(self) -> Dict:
        out = super().describe()
        out.update({'c': self.c, 'sigma': self.sigma, 's0': self.s0})
        return out


Coefficient = Union[DriftFn, DiffusionFn]


def _declared_sap(block: Dict) -> bool:
    value = block.get('declared_sap', True)
    if not isinstance(value, bool):
        raise InvalidInputError(f"declared_sap must be true or false, got {value!r}")
    return value


def drift_from_config(block: Dict, dim: int) -> DriftFn:
    kind = block.get('kind', 'affine')
    omega = float(block['omega'])
    forcing = {'declared_sap': _declared_sap(block),
               'b0': float(block.get('b0', 0.0)), 'b1': float(block.get('b1', 0.0)),
               'omega': omega, 'dim': dim, 'direction': block.get('direction')}
    if kind == 'affine':
        return AffineDrift(float(block.get('c', 0.0)), **forcing)
    if kind == 'saturating':
        return SaturatingDrift(float(block.get('kappa', block.get('c', 0.0))), **forcing)
    raise InvalidInputError(f"unknown drift kind {kind!r}")


def diffusion_from_config(block: Dict, dim: int) -> DiffusionFn:
    kind = block.get('kind', 'constant')
    omega = float(block.get('omega', 1.0))
    declared_sap = _declared_sap(block)
    if kind == 'constant':
        if 'matrix' in block:
            return ConstantDiffusion(DiffusionOperator(block['matrix']), omega, declared_sap)
        return ConstantDiffusion.scalar(float(block.get('sigma', 0.0)), dim, omega, declared_sap)
    if kind == 'affine':
        return AffineDiffusion(float(block.get('c', 0.0)), float(block.get('sigma', 0.0)),
                               float(block.get('s0', 0.0)), omega, dim, declared_sap)
    raise InvalidInputError(f"unknown diffusion kind {kind!r}")


def lipschitz_probe(fn: Coefficient, p: float, probe_pairs: int, rng: np.random.Generator,
                    spectrum: Optional[QSpectrum] = None, ensemble_size: int = 64,
                    horizon: float = 10.0, max_resamples: int = 10) -> float:
    """Largest E||fn(t,X) - fn(t,Y)||^p / E||X - Y||^p over random ensemble pairs."""
    if probe_pairs < MIN_PROBE_PAIRS:
        raise InvalidInputError(f"lipschitz_probe needs at least {MIN_PROBE_PAIRS} probe pairs")
    if isinstance(fn, DiffusionFn) and spectrum is None:
        raise InvalidInputError("diffusion probes need the noise spectrum for the L_2^0 norm")
    worst = 0.0
    for _ in range(probe_pairs):
        for _attempt in range(max_resamples):
            t = float(rng.uniform(0.0, horizon))
            scale = float(rng.uniform(0.1, 3.0))
            xs = scale * rng.standard_normal((ensemble_size, fn.dim))
            ys = xs + scale * rng.standard_normal((ensemble_size, fn.dim)) * rng.uniform(0.01, 1.0)
            denominator = float(np.mean(norms(xs - ys) ** p))
            if denominator > 0:
                break
        else:
            raise InvalidInputError("probe pairs keep coinciding; cannot estimate a Lipschitz ratio")
        numerator = float(np.mean(_gap_norms(fn, t, xs, t, ys, spectrum) ** p))
        worst = max(worst, numerator / denominator)
    declared = fn.declared_L(p, spectrum)
    if worst > declared * (1 + LIPSCHITZ_SLACK) + 1e-15:
        logger.warning(f"Probed Lipschitz ratio {worst:.6g} exceeds declared {declared:.6g}")
    return worst


def _gap_norms(fn: Coefficient, t_a: float, x_a: np.ndarray, t_b: float, x_b: np.ndarray,
               spectrum: Optional[QSpectrum]) -> np.ndarray:
    """Row-wise ||fn(t_a, x_a) - fn(t_b, x_b)|| in H or L_2^0."""
    if isinstance(fn, DiffusionFn):
        return hs_norms(fn.matrices(t_a, x_a) - fn.matrices(t_b, x_b), spectrum)
    return norms(fn.evaluate(t_a, x_a) - fn.evaluate(t_b, x_b))


def _lagged_series(fn: Coefficient, X: PathEnsemble, omega: float, p: float,
                   spectrum: Optional[QSpectrum], freeze_state: bool) -> MomentSeries:
    if X.grid[-1] - X.grid[0] < omega:
        raise InvalidInputError(f"grid span {X.grid[-1] - X.grid[0]} is shorter than omega={omega}")
    if isinstance(fn, DiffusionFn) and spectrum is None:
        raise InvalidInputError("diffusion defects need the noise spectrum for the L_2^0 norm")
    lag = X.index_of(X.grid[0] + omega)
    overlap = X.grid.size - lag
    estimate = np.empty(overlap)
    stderr = np.empty(overlap)
    for k in range(overlap):
        now = X.states(k)
        later = now if freeze_state else X.states(k + lag)
        gap = _gap_norms(fn, float(X.grid[k + lag]), later, float(X.grid[k]), now, spectrum)
        estimate[k], stderr[k] = mean_and_stderr(gap ** p)
    return MomentSeries(X.grid[:overlap], estimate, stderr, p)


def sap_defect(fn: Coefficient, X: PathEnsemble, omega: float, p: float,
               spectrum: Optional[QSpectrum] = None) -> MomentSeries:
    """d(t) = E||fn(t+omega, X(t+omega)) - fn(t, X(t))||^p on the overlapping grid."""
    return _lagged_series(fn, X, omega, p, spectrum, freeze_state=False)


def composition_bound(fn: Coefficient, X: PathEnsemble, omega: float, p: float,
                      spectrum: Optional[QSpectrum] = None) -> np.ndarray:
    """2^{p-1} (L d_X(t) + e(t)) with e(t) = E||fn(t+omega, X(t)) - fn(t, X(t))||^p.

    d_X is the input's own defect E||X(t+omega) - X(t)||^p; the bound dominates
    sap_defect pathwise for Lipschitz coefficients.
    """
    own = _lagged_series(fn, X, omega, p, spectrum, freeze_state=True)
    lag = X.index_of(X.grid[0] + omega)
    valid = X.paths[X.valid]
    input_defect = np.array([mean_and_stderr(norms(valid[:, k + lag] - valid[:, k]) ** p)[0]
                             for k in range(X.grid.size - lag)])
    return 2 ** (p - 1) * (fn.declared_L(p, spectrum) * input_defect + own.estimate)
