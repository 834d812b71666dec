# Evolution family identities and the exponential decay certificate.
import math

import numpy as np
import pytest

from evolution import (DiagonalPeriodicFamily, continuity_check, cocycle_check, decay_bound_check,
                       derivative_check, periodicity_check, random_probes, verify_family)
from hilbert_core import DimensionMismatchError, HilbertVec, InvalidInputError, norm


def family(rho=0.3, omega=1.0):
    return DiagonalPeriodicFamily([1.0, 1.5, 2.0, 3.0], rho=rho, omega=omega)


def test_certificate_constants():
    fam = family(rho=0.3, omega=2.0)
    assert fam.a == 1.0
    assert fam.M == pytest.approx(math.exp(0.3 * 2.0 / math.pi))
    assert DiagonalPeriodicFamily([2.0], rho=0.0, omega=1.0).M == 1.0


def test_unmodulated_family_is_exponential():
    fam = DiagonalPeriodicFamily([1.0, 2.0], rho=0.0, omega=1.0)
    out = fam.apply(1.5, 0.5, HilbertVec([1.0, 1.0]))
    assert np.allclose(out.coeffs, [math.exp(-1.0), math.exp(-2.0)], rtol=1e-15)


def test_apply_is_linear():
    fam = family()
    rng = np.random.default_rng(6)
    for _ in range(200):
        s = float(rng.uniform(0.0, 5.0))
        t = s + float(rng.uniform(0.0, 5.0))
        x, y = HilbertVec(rng.standard_normal(4)), HilbertVec(rng.standard_normal(4))
        a, b = rng.uniform(-3.0, 3.0, size=2)
        combined = fam.apply(t, s, x * a + y * b)
        separate = fam.apply(t, s, x) * a + fam.apply(t, s, y) * b
        assert norm(combined - separate) <= 1e-12 * max(1.0, norm(combined))


def test_apply_preconditions():
    fam = family()
    with pytest.raises(InvalidInputError):
        fam.apply(0.0, 1.0, HilbertVec.basis(0, 4))
    with pytest.raises(DimensionMismatchError):
        fam.apply(1.0, 0.0, HilbertVec.basis(0, 3))


def test_family_validation():
    with pytest.raises(InvalidInputError):
        DiagonalPeriodicFamily([1.0, -1.0], rho=0.0, omega=1.0)
    with pytest.raises(InvalidInputError):
        DiagonalPeriodicFamily([1.0], rho=-0.5, omega=1.0)
    with pytest.raises(InvalidInputError):
        DiagonalPeriodicFamily([1.0], rho=0.0, omega=0.0)


def test_from_config_linear_rates():
    fam = DiagonalPeriodicFamily.from_config({'mus': 'linear(1, 0.5)', 'rho': 0.1, 'omega': 1.0}, 4)
    assert np.allclose(fam.mus, [1.0, 1.5, 2.0, 2.5])
    with pytest.raises(DimensionMismatchError):
        DiagonalPeriodicFamily.from_config({'mus': [1.0, 2.0], 'omega': 1.0}, 3)


def test_identity_cocycle_and_periodicity():
    fam = family()
    v = HilbertVec([0.3, -1.2, 0.7, 2.0])
    assert norm(fam.apply(2.0, 2.0, v) - v) == 0.0
    assert cocycle_check(fam, 0.2, 1.1, 3.4, v) <= 1e-12 * norm(v)
    assert periodicity_check(fam, 3.4, 1.1, v) <= 1e-12 * norm(v)
    with pytest.raises(InvalidInputError):
        cocycle_check(fam, 1.0, 0.5, 2.0, v)


def test_decay_bound_holds_and_is_nearly_tight():
    fam = family(rho=0.5)
    probes = random_probes(fam, 500, np.random.default_rng(3))
    ratio = decay_bound_check(fam, probes)
    assert ratio <= 1 + 1e-10
    # e_1 at the extremes of the modulation hits M exactly with t - s = omega / 2
    tight = decay_bound_check(fam, [(0.5, 0.0, HilbertVec.basis(0, 4))])
    assert tight == pytest.approx(1.0, rel=1e-12)


def test_decay_bound_skips_zero_probes():
    fam = family()
    ratio = decay_bound_check(fam, [(1.0, 0.0, HilbertVec.zeros(4)), (1.0, 0.0, HilbertVec.basis(0, 4))])
    assert ratio <= 1.0
    with pytest.raises(InvalidInputError):
        decay_bound_check(fam, [(1.0, 0.0, HilbertVec.zeros(4))])


def test_strong_continuity_and_generator():
    fam = family()
    v = HilbertVec([1.0, -0.5, 0.25, 2.0])
    coarse, fine = continuity_check(fam, 1.3, 0.4, v)
    assert fine < coarse
    assert fine < 1e-3
    assert derivative_check(fam, 1.3, 0.4, v) < 1e-8


def test_verify_family_residuals():
    residuals = verify_family(family(rho=0.8, omega=0.5), count=1000, seed=0)
    assert residuals['cocycle_residual'] <= 1e-12
    assert residuals['periodicity_residual'] <= 1e-12
    assert residuals['identity_residual'] == 0.0
    assert residuals['decay_worst_ratio'] <= 1 + 1e-10
