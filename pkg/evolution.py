#!/usr/bin/env python3
"""
Evolution families U(t,s) satisfying the exponential omega-periodic stability
hypothesis: U(t+omega, s+omega) = U(t,s) and ||U(t,s)|| <= M exp(-a(t-s)).
"""

import math
import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Sequence, Tuple

import numpy as np

from hilbert_core import DimensionMismatchError, HilbertVec, InvalidInputError, norm
from qwiener import parse_family

logger = logging.getLogger(__name__)

Probe = Tuple[float, float, HilbertVec]


class EvolutionFamily(ABC):
    """Two-parameter operator family with declared certificate (M, a, omega).

    Subclasses implement ``propagate`` on state arrays (last axis = modes); the
    certificate is part of the declaration and is validated, never estimated.
    """

    def __init__(self, M: float, a: float, omega: float, dim: int):
        if not M >= 1:
            raise InvalidInputError(f"decay constant M must be >= 1, got {M}")
        if not a > 0:
            raise InvalidInputError(f"decay rate a must be positive, got {a}")
        if not omega > 0:
            raise InvalidInputError(f"period omega must be positive, got {omega}")
        self.M = float(M)
        self.a = float(a)
        self.omega = float(omega)
        self.dim = int(dim)

    @abstractmethod
    def propagate(self, t: float, s: float, states: np.ndarray) -> np.ndarray:
        """U(t,s) applied to every row of ``states``; assumes t >= s."""

    def apply(self, t: float, s: float, v: HilbertVec) -> HilbertVec:
        if t < s:
            raise InvalidInputError(f"U(t,s) needs t >= s, got t={t}, s={s}")
        if v.dim != self.dim:
            raise DimensionMismatchError(f"family acts on N={self.dim}, vector has N={v.dim}")
        return HilbertVec(self.propagate(t, s, v.coeffs))

    def describe(self) -> Dict:
        return {'M': self.M, 'a': self.a, 'omega': self.omega, 'N': self.dim}


class DiagonalPeriodicFamily(EvolutionFamily):
    """A(t) e_n = (-mu_n + rho sin(2 pi t / omega)) e_n, solved in closed form."""

    def __init__(self, mus: Sequence[float], rho: float, omega: float):
        mus = np.array(mus, dtype=float).reshape(-1)
        if mus.size < 1 or np.any(mus <= 0) or not np.all(np.isfinite(mus)):
            raise InvalidInputError(f"decay rates must be finite and positive, got {mus.tolist()}")
        if np.any(np.diff(mus) < 0):
            raise InvalidInputError(f"decay rates must be non-decreasing, got {mus.tolist()}")
        if rho < 0:
            raise InvalidInputError(f"modulation amplitude rho must be >= 0, got {rho}")
        mus.setflags(write=False)
        self.mus = mus
        self.rho = float(rho)
        super().__init__(M=math.exp(rho * omega / math.pi), a=float(mus.min()),
                         omega=omega, dim=mus.size)

    @classmethod
    def from_config(cls, block: Dict, dim: int) -> "DiagonalPeriodicFamily":
        mus = block['mus']
        if isinstance(mus, str):
            name, args = parse_family(mus)
            if name != 'linear' or len(args) != 2:
                raise InvalidInputError(f"mus must be a list or linear(start, step), got {mus!r}")
            mus = args[0] + args[1] * np.arange(dim)
        family = cls(mus, float(block.get('rho', 0.0)), float(block['omega']))
        if family.dim != dim:
            raise DimensionMismatchError(f"family has {family.dim} modes, N = {dim}")
        return family

    def _phase(self, t: float) -> float:
        return math.cos(2 * math.pi * t / self.omega)

    def multipliers(self, t: float, s: float) -> np.ndarray:
        modulation = self.rho * self.omega / (2 * math.pi) * (self._phase(s) - self._phase(t))
        return np.exp(-self.mus * (t - s) + modulation)

    def propagate(self, t: float, s: float, states: np.ndarray) -> np.ndarray:
        return states * self.multipliers(t, s)

    def generator(self, t: float) -> np.ndarray:
        """Diagonal of A(t)."""
        return -self.mus + self.rho * math.sin(2 * math.pi * t / self.omega)

    def describe(self) -> Dict:
        out = super().describe()
        out.update({'kind': 'diagonal_periodic', 'mus': self.mus.tolist(), 'rho': self.rho})
        return out


def decay_bound_check(fam: EvolutionFamily, probes: Sequence[Probe]) -> float:
    """Worst ratio ||U(t,s)v|| / (M exp(-a(t-s)) ||v||) over the probes."""
    if not probes:
        raise InvalidInputError("decay_bound_check needs at least one probe")
    worst = -math.inf
    skipped = 0
    for t, s, v in probes:
        if t < s:
            raise InvalidInputError(f"probe needs t >= s, got t={t}, s={s}")
        size = norm(v)
        if size == 0:
            skipped += 1
            continue
        ratio = norm(fam.apply(t, s, v)) / (fam.M * math.exp(-fam.a * (t - s)) * size)
        worst = max(worst, ratio)
    if skipped:
        logger.warning(f"Skipped {skipped} zero-norm probe(s)")
    if skipped == len(probes):
        raise InvalidInputError("every probe vector has zero norm")
    return worst


def cocycle_check(fam: EvolutionFamily, r: float, s: float, t: float, v: HilbertVec) -> float:
    """||U(t,s)U(s,r)v - U(t,r)v||."""
    if not r <= s <= t:
        raise InvalidInputError(f"cocycle check needs r <= s <= t, got {(r, s, t)}")
    return norm(fam.apply(t, s, fam.apply(s, r, v)) - fam.apply(t, r, v))


def periodicity_check(fam: EvolutionFamily, t: float, s: float, v: HilbertVec) -> float:
    """||U(t+omega, s+omega)v - U(t,s)v||."""
    return norm(fam.apply(t + fam.omega, s + fam.omega, v) - fam.apply(t, s, v))


def continuity_check(fam: EvolutionFamily, t: float, s: float, v: HilbertVec,
                     steps: Sequence[float] = (1e-2, 1e-4)) -> List[float]:
    """||U(t+h,s)v - U(t,s)v|| for each h."""
    base = fam.apply(t, s, v)
    return [norm(fam.apply(t + h, s, v) - base) for h in steps]


def derivative_check(fam: DiagonalPeriodicFamily, t: float, s: float, v: HilbertVec,
                     h: float = 1e-5) -> float:
    """Relative error of a central difference of U(.,s)v against A(t)U(t,s)v."""
    if t - h < s:
        raise InvalidInputError("derivative check needs t - h >= s")
    exact = fam.generator(t) * fam.apply(t, s, v).coeffs
    numeric = (fam.apply(t + h, s, v).coeffs - fam.apply(t - h, s, v).coeffs) / (2 * h)
    scale = max(np.linalg.norm(exact), np.finfo(float).tiny)
    return float(np.linalg.norm(numeric - exact) / scale)


def random_probes(fam: EvolutionFamily, count: int, rng: np.random.Generator,
                  horizon: float = 5.0) -> List[Probe]:
    """Random (t, s, v) with 0 <= s <= t <= horizon and Gaussian v."""
    probes = []
    for _ in range(count):
        s, t = np.sort(rng.uniform(0.0, horizon, size=2))
        probes.append((float(t), float(s), HilbertVec(rng.standard_normal(fam.dim))))
    return probes


def verify_family(fam: EvolutionFamily, count: int = 1000, seed: int = 0) -> Dict[str, float]:
    """Run every identity check on random probes and report worst residuals."""
    rng = np.random.default_rng(seed)
    probes = random_probes(fam, count, rng)
    cocycle, periodic, identity = 0.0, 0.0, 0.0
    for t, s, v in probes:
        r = float(rng.uniform(0.0, s))
        size = norm(v)
        cocycle = max(cocycle, cocycle_check(fam, r, s, t, v) / size)
        periodic = max(periodic, periodicity_check(fam, t, s, v) / size)
        identity = max(identity, norm(fam.apply(t, t, v) - v) / size)
    results = {
        'cocycle_residual': cocycle,
        'periodicity_residual': periodic,
        'identity_residual': identity,
        'decay_worst_ratio': decay_bound_check(fam, probes),
    }
    logger.info(f"Evolution family checks over {count} probes: {results}")
    return results
