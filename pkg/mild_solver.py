#!/usr/bin/env python3
"""
Exponential-Euler integration of the mild solution

    X(t) = U(t,0)c0 + int_0^t U(t,s) f(s,X(s)) ds + int_0^t U(t,s) g(s,X(s)) dW(s)

and Picard iteration of the fixed-point operator Gamma on frozen noise.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from coefficients import DiffusionFn, DriftFn
from evolution import EvolutionFamily
from hilbert_core import (DEFAULT_DIMENSION, DimensionMismatchError, HilbertVec, InvalidInputError,
                          PathEnsemble, moment_series, sup_pnorm)
from qwiener import QSpectrum, WienerIncrement, sample_increments

logger = logging.getLogger(__name__)

# Paths per work unit. Fixed so results never depend on the worker count.
CHUNK_PATHS = 256
GRID_TOLERANCE = 1e-9
PICARD_FLOOR = 1e-14


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    N: int = DEFAULT_DIMENSION
    P: int = 1
    p: float = 2.0
    seed: int = 0
    omega: float = 1.0
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if not self.omega > 0:
            raise InvalidInputError(f"omega must be positive, got {self.omega}")
        if self.T < self.omega:
            raise InvalidInputError(f"horizon T={self.T} must be at least omega={self.omega}")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > GRID_TOLERANCE * max(1.0, ratio):
            raise InvalidInputError(f"T/dt = {ratio} is not an integer")
        if self.P < 1 or self.N < 1:
            raise InvalidInputError(f"need P >= 1 and N >= 1, got P={self.P}, N={self.N}")
        if self.p < 2:
            raise InvalidInputError(f"moment order p must be >= 2, got {self.p}")
        if self.record_stride < 1 or self.n_steps % self.record_stride:
            raise InvalidInputError(f"record_stride {self.record_stride} must divide {self.n_steps} steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def record_grid(self) -> np.ndarray:
        return self.grid[::self.record_stride]

    def to_dict(self) -> Dict:
        return asdict(self)


class FrozenNoise:
    """Wiener increments for every path and step, held fixed across Gamma applications."""

    def __init__(self, increments: np.ndarray, dt: float, seed: int, spectrum: QSpectrum):
        if increments.ndim != 3 or increments.shape[2] != spectrum.dim:
            raise DimensionMismatchError(f"increments must be (P, steps, {spectrum.dim}), got {increments.shape}")
        increments.setflags(write=False)
        self.increments = increments
        self.dt = float(dt)
        self.seed = int(seed)
        self.spectrum = spectrum

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @classmethod
    def draw(cls, cfg: SimConfig, spectrum: QSpectrum, threads: int = 1) -> "FrozenNoise":
        """Increments keyed by (cfg.seed, path); identical for every thread count."""
        increments = np.empty((cfg.P, cfg.n_steps, spectrum.dim))

        def fill(rows: range) -> Tuple[range, np.ndarray]:
            return rows, sample_increments(spectrum, cfg.dt, cfg.n_steps, cfg.seed, rows)

        for rows, block in _map_chunks(fill, cfg.P, threads):
            increments[rows.start:rows.stop] = block
        return cls(increments, cfg.dt, cfg.seed, spectrum)


class MildSolution(PathEnsemble):
    """Path ensemble plus the provenance needed to re-run or re-evaluate it."""

    def __init__(self, grid: np.ndarray, paths: np.ndarray, valid: np.ndarray, config: SimConfig,
                 family: EvolutionFamily, drift: Optional[DriftFn], diffusion: Optional[DiffusionFn],
                 spectrum: QSpectrum, c0: HilbertVec, noise: Optional[FrozenNoise] = None):
        super().__init__(grid, paths, config.seed, valid=valid)
        self.config = config
        self.family = family
        self.drift = drift
        self.diffusion = diffusion
        self.spectrum = spectrum
        self.c0 = c0
        self.noise = noise


def _chunks(n_paths: int) -> List[range]:
    return [range(start, min(start + CHUNK_PATHS, n_paths)) for start in range(0, n_paths, CHUNK_PATHS)]


def _map_chunks(work: Callable, n_paths: int, threads: int) -> List:
    chunks = _chunks(n_paths)
    if threads <= 1 or len(chunks) == 1:
        return [work(rows) for rows in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, chunks))


def _kick(f: Optional[DriftFn], g: Optional[DiffusionFn], t: float, dt: float,
          at: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """f(t, x) dt + g(t, x) dW, both evaluated at the left endpoint."""
    out = np.zeros_like(at)
    if f is not None:
        out += f.evaluate(t, at) * dt
    if g is not None:
        out += g.apply(t, at, increments)
    return out


def step(fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn], t_k: float, dt: float,
         X_k: HilbertVec, dW_k: WienerIncrement) -> HilbertVec:
    """X_{k+1} = U(t_k + dt, t_k)[X_k + f(t_k, X_k) dt + g(t_k, X_k) dW_k]."""
    if not np.isclose(dW_k.dt, dt, rtol=1e-12, atol=0.0):
        raise InvalidInputError(f"increment spans {dW_k.dt}, step is {dt}")
    if not X_k.dim == dW_k.dvalue.dim == fam.dim:
        raise DimensionMismatchError(f"state N={X_k.dim}, increment N={dW_k.dvalue.dim}, family N={fam.dim}")
    state = X_k.coeffs[np.newaxis, :]
    kicked = state + _kick(f, g, t_k, dt, state, dW_k.dvalue.coeffs[np.newaxis, :])
    return HilbertVec(fam.propagate(t_k + dt, t_k, kicked)[0])


def _check_system(cfg: SimConfig, fam: EvolutionFamily, c0: HilbertVec, spectrum: QSpectrum) -> None:
    dims = {'config': cfg.N, 'family': fam.dim, 'c0': c0.dim, 'spectrum': spectrum.dim}
    if len(set(dims.values())) != 1:
        raise DimensionMismatchError(f"dimension mismatch: {dims}")


def _integrate_chunk(cfg: SimConfig, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
                     c0: HilbertVec, increments: np.ndarray,
                     frozen_input: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Recursion Y_{k+1} = U(t_{k+1}, t_k)[Y_k + f(t_k, Z_k) dt + g(t_k, Z_k) dW_k].

    Z = Y gives the exponential-Euler solution; Z = frozen_input gives Gamma(Z).
    Rows whose state turns non-finite are frozen at NaN and flagged invalid.
    """
    n_rows = increments.shape[0]
    grid = cfg.grid
    stride = cfg.record_stride
    out = np.empty((n_rows, cfg.n_steps // stride + 1, cfg.N))
    state = np.tile(c0.coeffs, (n_rows, 1))
    alive = np.ones(n_rows, dtype=bool)
    out[:, 0] = state
    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(cfg.n_steps):
            at = state if frozen_input is None else frozen_input[:, k]
            kicked = state + _kick(f, g, grid[k], cfg.dt, at, increments[:, k])
            state = fam.propagate(grid[k + 1], grid[k], kicked)
            blown = alive & ~np.all(np.isfinite(state), axis=1)
            if blown.any():
                alive &= ~blown
            state[~alive] = np.nan
            if (k + 1) % stride == 0:
                out[:, (k + 1) // stride] = state
    return out, alive


def simulate(cfg: SimConfig, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
             c0: HilbertVec, spectrum: QSpectrum, threads: int = 1,
             noise: Optional[FrozenNoise] = None, keep_noise: bool = False) -> MildSolution:
    """Advance cfg.P paths by ``step`` on the uniform grid; path i uses stream (seed, i)."""
    _check_system(cfg, fam, c0, spectrum)
    if noise is not None and (noise.n_paths != cfg.P or noise.n_steps != cfg.n_steps):
        raise DimensionMismatchError("frozen noise does not match the configuration grid")
    if noise is None and keep_noise:
        noise = FrozenNoise.draw(cfg, spectrum, threads)

    def work(rows: range) -> Tuple[np.ndarray, np.ndarray]:
        if noise is not None:
            increments = noise.increments[rows.start:rows.stop]
        else:
            increments = sample_increments(spectrum, cfg.dt, cfg.n_steps, cfg.seed, rows)
        return _integrate_chunk(cfg, fam, f, g, c0, increments)

    logger.info(f"Simulating {cfg.P} paths x {cfg.n_steps} steps (N={cfg.N}, dt={cfg.dt:g}, threads={threads})")
    paths, valid = _assemble(_map_chunks(work, cfg.P, threads))
    if not valid.all():
        blown = np.flatnonzero(~valid)
        logger.warning(f"❌ {blown.size} of {cfg.P} paths blew up (first: path {blown[0]}); "
                       f"moments use the remaining paths")
    return MildSolution(cfg.record_grid, paths, valid, cfg, fam, f, g, spectrum, c0, noise)


def _assemble(parts: List[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    return np.concatenate([p for p, _ in parts], axis=0), np.concatenate([v for _, v in parts])


def gamma_apply(cfg: SimConfig, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
                c0: HilbertVec, Phi: PathEnsemble, noise: FrozenNoise, threads: int = 1) -> PathEnsemble:
    """(Gamma Phi)(t_k) = U(t_k,0)c0 + sum_{j<k} U(t_k,t_j)[f(t_j,Phi_j) dt + g(t_j,Phi_j) dW_j].

    The sum is accumulated through the cocycle U(t_{k+1},t_j) = U(t_{k+1},t_k)U(t_k,t_j).
    """
    if cfg.record_stride != 1:
        raise InvalidInputError("Gamma needs every grid point recorded (record_stride = 1)")
    _check_system(cfg, fam, c0, noise.spectrum)
    if Phi.grid.size != cfg.n_steps + 1 or not np.allclose(Phi.grid, cfg.grid, rtol=0, atol=GRID_TOLERANCE):
        raise DimensionMismatchError("Phi is not on the configuration grid")
    if Phi.n_paths != noise.n_paths or noise.n_steps != cfg.n_steps or Phi.dim != cfg.N:
        raise DimensionMismatchError("Phi and frozen noise disagree in paths, steps or dimension")

    def work(rows: range) -> Tuple[np.ndarray, np.ndarray]:
        return _integrate_chunk(cfg, fam, f, g, c0, noise.increments[rows.start:rows.stop],
                                frozen_input=Phi.paths[rows.start:rows.stop])

    paths, valid = _assemble(_map_chunks(work, Phi.n_paths, threads))
    return PathEnsemble(Phi.grid, paths, noise.seed, valid=valid & Phi.valid)


@dataclass
class PicardResult:
    distances: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    power_distances: List[float] = field(default_factory=list)
    power_ratios: List[float] = field(default_factory=list)
    converged: bool = False


def picard_iterate(cfg: SimConfig, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
                   c0: HilbertVec, spectrum: QSpectrum, iters: int, threads: int = 1,
                   noise: Optional[FrozenNoise] = None) -> PicardResult:
    """Iterate Phi_{k+1} = Gamma Phi_k from Phi_0 = c0 on frozen noise.

    ``distances`` use the sup_t (E||.||^p)^{1/p} metric, ``power_distances``
    sup_t E||.||^p; ratios are successive quotients of each.
    """
    if iters < 3:
        raise InvalidInputError(f"picard_iterate needs at least 3 iterations, got {iters}")
    if noise is None:
        noise = FrozenNoise.draw(cfg, spectrum, threads)
    current = PathEnsemble(cfg.grid, np.broadcast_to(c0.coeffs, (cfg.P, cfg.n_steps + 1, cfg.N)).copy(),
                           cfg.seed)
    result = PicardResult()
    for k in range(iters):
        following = gamma_apply(cfg, fam, f, g, c0, current, noise, threads)
        series = moment_series(following.difference(current), cfg.p)
        power = float(np.max(series.estimate))
        distance = sup_pnorm(series)
        if result.distances and result.distances[-1] > 0:
            result.ratios.append(distance / result.distances[-1])
            result.power_ratios.append(power / result.power_distances[-1])
        result.distances.append(distance)
        result.power_distances.append(power)
        logger.info(f"Picard iteration {k + 1}: distance={distance:.6e}")
        current = following
        if distance < PICARD_FLOOR:
            result.converged = True
            logger.info(f"✅ Picard iteration converged after {k + 1} applications")
            break
    return result


def decompose(solution: MildSolution, threads: int = 1) -> Dict[str, PathEnsemble]:
    """Split a solution into U(t,0)c0, the drift convolution and the stochastic convolution.

    Each term is integrated on the solution's own frozen noise with the
    coefficients evaluated along the solution.
    """
    cfg = solution.config
    if solution.noise is None or cfg.record_stride != 1:
        raise InvalidInputError("decompose needs a solution simulated with keep_noise=True and record_stride=1")
    zero = HilbertVec.zeros(cfg.N)
    parts = {
        'homogeneous': (solution.c0, None, None),
        'drift_convolution': (zero, solution.drift, None),
        'stochastic_convolution': (zero, None, solution.diffusion),
    }
    terms = {}
    for name, (start, f, g) in parts.items():
        def work(rows: range, start=start, f=f, g=g) -> Tuple[np.ndarray, np.ndarray]:
            return _integrate_chunk(cfg, solution.family, f, g, start,
                                    solution.noise.increments[rows.start:rows.stop],
                                    frozen_input=solution.paths[rows.start:rows.stop])
        paths, valid = _assemble(_map_chunks(work, cfg.P, threads))
        terms[name] = PathEnsemble(solution.grid, paths, cfg.seed, valid=valid & solution.valid)
    return terms
