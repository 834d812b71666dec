#!/usr/bin/env python3
"""
Condition checkers for existence (Theta, Xi) and stability (margin) of the
p-mean S-asymptotically omega-periodic solution, the Gronwall envelope, and the
Monte Carlo experiments that test the two conclusions on simulated ensembles.
"""

import math
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.linear_model import LinearRegression

from coefficients import DiffusionFn, DriftFn
from evolution import EvolutionFamily
from hilbert_core import (BlowUpError, HilbertVec, InvalidInputError, MomentSeries, PathEnsemble,
                          mean_and_stderr, moment_series, norm, norms)
from mild_solver import FrozenNoise, MildSolution, SimConfig, decompose, simulate
from qwiener import QSpectrum, bdg_constant

logger = logging.getLogger(__name__)

FIT_WINDOW = 0.4
FIT_SIGNAL_TO_NOISE = 10.0
SAP_TAIL_FRACTION = 0.1
SAP_STDERR_FLOOR = 5.0
# Defects below this fraction of sup_t E||X(t)||^p are float roundoff.
SAP_ROUNDOFF = 1e-20
STABILITY_STDERR_SLACK = 5.0


@dataclass(frozen=True)
class ConditionInputs:
    p: float
    M: float
    a: float
    Lf: float
    Lg: float
    Cp: float = 1.0

    def __post_init__(self):
        values = asdict(self)
        if not all(math.isfinite(v) for v in values.values()):
            raise InvalidInputError(f"condition inputs must be finite, got {values}")
        if self.p < 2:
            raise InvalidInputError(f"p must be >= 2, got {self.p}")
        if self.M < 1:
            raise InvalidInputError(f"M must be >= 1, got {self.M}")
        if self.a <= 0:
            raise InvalidInputError(f"a must be positive, got {self.a}")
        if self.Lf < 0 or self.Lg < 0:
            raise InvalidInputError(f"Lipschitz constants must be >= 0, got Lf={self.Lf}, Lg={self.Lg}")
        if self.Cp <= 0:
            raise InvalidInputError(f"C_p must be positive, got {self.Cp}")

    @classmethod
    def from_system(cls, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
                    spectrum: QSpectrum, p: float, Cp: Optional[float] = None) -> "ConditionInputs":
        """Read (M, a) off the family and L(f), L(g) off the coefficients."""
        return cls(p=p, M=fam.M, a=fam.a,
                   Lf=f.declared_L(p, spectrum) if f is not None else 0.0,
                   Lg=g.declared_L(p, spectrum) if g is not None else 0.0,
                   Cp=bdg_constant(p, Cp))

    def to_dict(self) -> Dict:
        return asdict(self)


def theta(inputs: ConditionInputs) -> float:
    """Theta = 2^{p-1} M^p (L(f) a^{-p} + C_p L(g) a^{-p/2}), for p > 2."""
    p, M, a = inputs.p, inputs.M, inputs.a
    if p <= 2:
        raise InvalidInputError("Theta applies to p > 2; use xi for p = 2")
    return 2 ** (p - 1) * M ** p * (inputs.Lf * a ** (-p) + inputs.Cp * inputs.Lg * a ** (-p / 2))


def xi(inputs: ConditionInputs) -> float:
    """Xi = 2 M^2 (L(f)/a^2 + L(g)/a), the p = 2 contraction constant."""
    if inputs.p != 2:
        logger.warning(f"Xi is the p = 2 constant; evaluating it for p = {inputs.p}")
    M, a = inputs.M, inputs.a
    return 2 * M ** 2 * (inputs.Lf / a ** 2 + inputs.Lg / a)


def contraction_constant(inputs: ConditionInputs) -> float:
    return xi(inputs) if inputs.p == 2 else theta(inputs)


def stability_margin(inputs: ConditionInputs) -> float:
    """a minus the perturbation rate; positive certifies p-mean asymptotic stability."""
    p, M, a = inputs.p, inputs.M, inputs.a
    if p == 2:
        return a - 3 * M ** 2 * (inputs.Lf / a + inputs.Lg)
    return a - 3 ** (p - 1) * M ** p * (inputs.Lf * a ** (1 - p) + inputs.Lg * inputs.Cp * a ** ((2 - p) / 2))


def condition_report(inputs: ConditionInputs) -> Dict:
    constant = contraction_constant(inputs)
    margin = stability_margin(inputs)
    return {
        'inputs': inputs.to_dict(),
        'constant_name': 'Xi' if inputs.p == 2 else 'Theta',
        'contraction_constant': constant,
        'existence_certified': constant < 1,
        'stability_margin': margin,
        'stability_certified': margin > 0,
    }


def condition_counterexamples(samples: int, seed: int, ps: Sequence[float] = (2.0, 3.0, 4.0),
                              a_range: Sequence[float] = (0.5, 20.0)) -> List[Dict]:
    """Random inputs where the stability margin is positive but Theta/Xi >= 1."""
    rng = np.random.default_rng(seed)
    found = []
    for _ in range(samples):
        p = float(rng.choice(ps))
        inputs = ConditionInputs(p=p, M=float(rng.uniform(1.0, 3.0)), a=float(rng.uniform(*a_range)),
                                 Lf=float(rng.uniform(0.0, 5.0)), Lg=float(rng.uniform(0.0, 5.0)),
                                 Cp=bdg_constant(p))
        if stability_margin(inputs) > 0 and contraction_constant(inputs) >= 1:
            found.append(inputs.to_dict())
    if found:
        logger.warning(f"❌ {len(found)} input(s) certify stability but not contraction")
    return found


@dataclass(frozen=True)
class GronwallParams:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma)):
            raise InvalidInputError("Gronwall parameters must be finite")
        if self.alpha < 0 or self.beta <= 0 or self.gamma < 0:
            raise InvalidInputError(f"need alpha >= 0, beta > 0, gamma >= 0, got {self}")


def gronwall_envelope(gp: GronwallParams, t: float) -> float:
    """alpha exp((-beta + gamma) t)."""
    if t < 0:
        raise InvalidInputError(f"Gronwall envelope needs t >= 0, got {t}")
    return gp.alpha * math.exp((-gp.beta + gp.gamma) * t)


def gronwall_solution(gp: GronwallParams, T: float, dt: float) -> np.ndarray:
    """u on a uniform grid with equality in u(t) = alpha e^{-beta t} + gamma int_0^t e^{-beta(t-s)} u(s) ds.

    The integral uses the left-point rule, accumulated as sum_j e^{beta s_j} u(s_j) dt.
    """
    n = int(round(T / dt))
    grid = np.arange(n + 1) * dt
    u = np.empty(n + 1)
    accumulated = 0.0
    for k, t in enumerate(grid):
        u[k] = math.exp(-gp.beta * t) * (gp.alpha + gp.gamma * accumulated)
        accumulated += math.exp(gp.beta * t) * u[k] * dt
    return np.column_stack([grid, u])


def fit_decay_rate(series: MomentSeries, window: float = FIT_WINDOW) -> float:
    """Least-squares slope of log(estimate) against t over the last ``window`` share of the grid.

    Only points with estimate > 10 stderr (and > 0) enter the fit; NaN if fewer than two remain.
    """
    t = series.grid
    start = t[0] + (1.0 - window) * (t[-1] - t[0])
    mask = (t >= start - 1e-12) & (series.estimate > FIT_SIGNAL_TO_NOISE * series.stderr) & (series.estimate > 0)
    if np.count_nonzero(mask) < 2:
        logger.warning("Too few points above the noise floor to fit a decay rate")
        return float('nan')
    model = LinearRegression().fit(t[mask].reshape(-1, 1), np.log(series.estimate[mask]))
    return float(model.coef_[0])


@dataclass
class SapDiagnostic:
    series: MomentSeries
    fitted_rate: float
    passed: bool
    initial: float
    tail: float
    tail_stderr: float

    def summary(self) -> Dict:
        return {'fitted_rate': self.fitted_rate, 'passed': self.passed, 'initial_defect': self.initial,
                'tail_defect': self.tail, 'tail_stderr': self.tail_stderr,
                'tail_time': float(self.series.grid[-1])}


def sap_diagnostic(ens: PathEnsemble, omega: float, p: float) -> SapDiagnostic:
    """Pathwise-paired defect d(t) = E||X(t+omega) - X(t)||^p and its decay verdict."""
    lag = ens.index_of(ens.grid[0] + omega)
    if lag == 0:
        raise InvalidInputError("omega must span at least one grid step")
    if ens.grid[-1] - ens.grid[0] < 5 * omega - 1e-9:
        logger.warning(f"Grid covers fewer than 5 periods ({ens.grid[-1] - ens.grid[0]:g} vs omega={omega:g})")
    valid = ens.paths[ens.valid]
    if valid.shape[0] == 0:
        raise BlowUpError(ens.invalid_count)
    gaps = norms(valid[:, lag:] - valid[:, :-lag]) ** p
    stats = np.array([mean_and_stderr(gaps[:, k]) for k in range(gaps.shape[1])])
    series = MomentSeries(ens.grid[:gaps.shape[1]], stats[:, 0], stats[:, 1], p)
    initial, tail, tail_err = series.estimate[0], series.estimate[-1], series.stderr[-1]
    roundoff = SAP_ROUNDOFF * max(1.0, float(np.max(np.mean(norms(valid) ** p, axis=0))))
    passed = bool(tail <= max(SAP_TAIL_FRACTION * initial, SAP_STDERR_FLOOR * tail_err, roundoff))
    result = SapDiagnostic(series, fit_decay_rate(series), passed, float(initial), float(tail), float(tail_err))
    logger.info(f"{'✅' if passed else '❌'} SAP defect d(0)={initial:.4e} tail={tail:.4e} "
                f"rate={result.fitted_rate:.3f}")
    return result


def convolution_sap_diagnostics(solution: MildSolution, threads: int = 1) -> Dict[str, SapDiagnostic]:
    """sap_diagnostic of each term of the mild-solution formula."""
    p, omega = solution.config.p, solution.config.omega
    return {name: sap_diagnostic(term, omega, p) for name, term in decompose(solution, threads).items()}


def boundedness(series: MomentSeries) -> float:
    """sup_t E||X(t)||^p over the grid."""
    return float(np.max(series.estimate))


def continuity_modulus(ens: PathEnsemble, p: float) -> float:
    """Largest one-step mean increment E||X(t_{k+1}) - X(t_k)||^p."""
    valid = ens.paths[ens.valid]
    if valid.shape[1] < 2:
        return 0.0
    increments = norms(np.diff(valid, axis=1)) ** p
    return float(max(mean_and_stderr(increments[:, k])[0] for k in range(increments.shape[1])))


@dataclass
class StabilityResult:
    diff: MomentSeries
    envelope: np.ndarray
    fitted_rate: float
    passed: Optional[bool]
    margin: float
    inputs: ConditionInputs
    invalid_paths: int

    def summary(self) -> Dict:
        return {'fitted_rate': self.fitted_rate, 'passed': self.passed, 'stability_margin': self.margin,
                'certified': self.margin > 0, 'invalid_paths': self.invalid_paths,
                'condition_inputs': self.inputs.to_dict()}


def stability_experiment(cfg: SimConfig, fam: EvolutionFamily, f: Optional[DriftFn], g: Optional[DiffusionFn],
                         c0_a: HilbertVec, c0_b: HilbertVec, spectrum: QSpectrum,
                         Cp: Optional[float] = None, threads: int = 1) -> StabilityResult:
    """Two solutions on shared noise; their p-th moment gap against the Gronwall envelope."""
    inputs = ConditionInputs.from_system(fam, f, g, spectrum, cfg.p, Cp)
    margin = stability_margin(inputs)
    if margin <= 0:
        logger.warning(f"Stability margin {margin:.4g} <= 0: condition not certified, verdict not applicable")
    noise = FrozenNoise.draw(cfg, spectrum, threads)
    first = simulate(cfg, fam, f, g, c0_a, spectrum, threads, noise=noise)
    second = simulate(cfg, fam, f, g, c0_b, spectrum, threads, noise=noise)
    gap = first.difference(second)
    diff = moment_series(gap, cfg.p)
    prefactor = 3 ** (cfg.p - 1) * fam.M ** cfg.p * norm(c0_a - c0_b) ** cfg.p
    envelope = prefactor * np.exp(-margin * diff.grid)
    relative = np.divide(diff.stderr, diff.estimate, out=np.zeros_like(diff.estimate),
                         where=diff.estimate > 0)
    within = diff.estimate <= envelope * (1 + STABILITY_STDERR_SLACK * relative)
    passed = bool(np.all(within)) if margin > 0 else None
    rate = fit_decay_rate(diff, window=1.0) if prefactor > 0 else float('nan')
    logger.info(f"Stability: margin={margin:.4f} fitted rate={rate:.4f} passed={passed}")
    return StabilityResult(diff, envelope, rate, passed, margin, inputs, gap.invalid_count)
