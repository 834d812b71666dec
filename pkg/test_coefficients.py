# Drift and diffusion families, Lipschitz probing and composition defects.
import math

import numpy as np
import pytest

from coefficients import (AffineDiffusion, AffineDrift, ConstantDiffusion, SaturatingDrift,
                          composition_bound, diffusion_from_config, drift_from_config,
                          lipschitz_probe, sap_defect)
from hilbert_core import HilbertVec, InvalidInputError, PathEnsemble
from qwiener import DiffusionOperator, QSpectrum, hs_norm


def constant_ensemble(value, grid, paths=1):
    data = np.broadcast_to(np.asarray(value, dtype=float), (paths, grid.size, np.size(value))).copy()
    return PathEnsemble(grid, data, seed=0)


def test_affine_drift_evaluation():
    f = AffineDrift(0.5, b0=1.0, b1=2.0, omega=1.0, dim=2)
    out = f.eval(0.25, HilbertVec([1.0, -2.0]))
    assert np.allclose(out.coeffs, [0.5 + 1.0 + 2.0 * math.exp(-0.25), -1.0])


def test_linear_drift_probe_matches_power_constant():
    rng = np.random.default_rng(0)
    f = AffineDrift(0.5, dim=3)
    assert lipschitz_probe(f, 2, 100, rng) == pytest.approx(0.25, rel=1e-12)
    assert lipschitz_probe(f, 4, 100, rng) == pytest.approx(0.0625, rel=1e-12)
    assert f.declared_L(4) == 0.0625


def test_constant_diffusion_probe_is_zero():
    g = ConstantDiffusion.scalar(0.3, 2)
    spec = QSpectrum([1.0, 0.5])
    assert lipschitz_probe(g, 2, 100, np.random.default_rng(1), spectrum=spec) == 0.0
    assert g.declared_L(2) == 0.0


def test_saturating_drift_stays_below_declared_constant():
    f = SaturatingDrift(0.8, dim=4)
    probed = lipschitz_probe(f, 2, 200, np.random.default_rng(2))
    assert 0 < probed <= f.declared_L(2) * 1.05


def test_affine_diffusion_constant_depends_on_spectrum():
    spec = QSpectrum([0.5, 0.25])
    g = AffineDiffusion(0.4, sigma=0.1, dim=2)
    assert g.declared_L(2, spec) == pytest.approx(0.16 * 0.5)
    probed = lipschitz_probe(g, 2, 100, np.random.default_rng(3), spectrum=spec)
    assert probed <= g.declared_L(2, spec) * 1.05
    with pytest.raises(InvalidInputError):
        g.declared_L(2)
    with pytest.raises(InvalidInputError):
        lipschitz_probe(g, 2, 100, np.random.default_rng(3))


def test_diffusion_eval_returns_operator():
    g = AffineDiffusion(1.0, sigma=0.5, dim=2)
    op = g.eval(0.0, HilbertVec([1.0, 2.0]))
    assert isinstance(op, DiffusionOperator)
    assert np.allclose(op.as_matrix(), np.diag([1.5, 2.5]))
    assert hs_norm(op, QSpectrum([1.0, 1.0])) == pytest.approx(math.sqrt(1.5 ** 2 + 2.5 ** 2))


def test_probe_needs_enough_pairs():
    with pytest.raises(InvalidInputError):
        lipschitz_probe(AffineDrift(1.0), 2, 10, np.random.default_rng(0))


def test_sap_defect_time_invariant_is_zero():
    grid = np.arange(0, 301) * 0.01
    d = sap_defect(AffineDrift(0.7, dim=2), constant_ensemble([1.0, 2.0], grid, paths=4), 1.0, 2)
    assert np.all(d.estimate == 0.0)


def test_sap_defect_transient_forcing_closed_form():
    grid = np.arange(0, 301) * 0.01
    f = AffineDrift(0.0, b1=1.0, omega=1.0, dim=1)
    d = sap_defect(f, constant_ensemble([0.0], grid), 1.0, 2)
    expected = np.exp(-2 * d.grid) * (1 - math.exp(-1)) ** 2
    assert d.estimate[0] == pytest.approx(0.39958, abs=1e-5)
    assert np.allclose(d.estimate, expected, rtol=1e-10)
    assert d.estimate[-1] <= 0.1 * d.estimate[0]


def test_sap_defect_periodic_forcing_vanishes():
    grid = np.arange(0, 201) * 0.05
    f = AffineDrift(0.3, b0=2.0, omega=2.0, dim=1)
    d = sap_defect(f, constant_ensemble([1.5], grid), 2.0, 2)
    assert np.max(d.estimate) < 1e-24


def test_sap_defect_grid_shorter_than_period():
    grid = np.arange(0, 11) * 0.05
    with pytest.raises(InvalidInputError):
        sap_defect(AffineDrift(1.0), constant_ensemble([0.0], grid), 1.0, 2)


def test_composition_bound_dominates_defect():
    rng = np.random.default_rng(4)
    grid = np.arange(0, 601) * 0.01
    start = rng.standard_normal((200, 1, 2))
    paths = start * np.exp(-grid)[np.newaxis, :, np.newaxis]
    X = PathEnsemble(grid, paths, seed=4)
    f = AffineDrift(0.5, b0=1.0, b1=1.0, omega=1.0, dim=2)
    for p in (2, 4):
        defect = sap_defect(f, X, 1.0, p)
        bound = composition_bound(f, X, 1.0, p)
        assert np.all(defect.estimate <= bound * (1 + 1e-12))
        assert defect.estimate[-1] <= 0.1 * defect.estimate[0]


def test_config_builders():
    f = drift_from_config({'kind': 'saturating', 'kappa': 0.5, 'omega': 1.0}, 3)
    assert isinstance(f, SaturatingDrift) and f.kappa == 0.5
    g = diffusion_from_config({'kind': 'constant', 'sigma': 0.2, 'omega': 1.0}, 3)
    assert isinstance(g, ConstantDiffusion)
    with pytest.raises(InvalidInputError):
        drift_from_config({'kind': 'cubic', 'omega': 1.0}, 3)
    with pytest.raises(InvalidInputError):
        diffusion_from_config({'kind': 'levy'}, 3)


def test_config_builders_carry_the_sap_declaration():
    assert drift_from_config({'kind': 'affine', 'c': 0.5, 'omega': 1.0}, 2).declared_sap
    f = drift_from_config({'kind': 'affine', 'c': 0.5, 'omega': 1.0, 'declared_sap': False}, 2)
    g = diffusion_from_config({'kind': 'affine', 'c': 0.1, 'sigma': 0.2, 'omega': 1.0, 'declared_sap': False}, 2)
    assert not f.declared_sap and not g.declared_sap
    assert f.describe()['declared_sap'] is False
    with pytest.raises(InvalidInputError):
        drift_from_config({'kind': 'affine', 'omega': 1.0, 'declared_sap': 'no'}, 2)
    with pytest.raises(InvalidInputError):
        diffusion_from_config({'kind': 'constant', 'sigma': 0.2, 'declared_sap': 0}, 2)
