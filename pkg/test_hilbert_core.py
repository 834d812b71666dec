# Value types, norms and Monte Carlo moment estimators.
import numpy as np
import pandas as pd
import pytest

from hilbert_core import (BlowUpError, DimensionMismatchError, HilbertVec, InvalidInputError, MomentSeries,
                          PathEnsemble, format_real, mean_and_stderr, moment_series, norm,
                          pth_moment, sup_pnorm, write_csv)


def test_norm_examples():
    assert norm(HilbertVec.zeros(4)) == 0.0
    assert norm(HilbertVec.basis(0, 4)) == 1.0
    assert norm(HilbertVec([3, 4, 0, 0])) == 5.0


def test_norm_triangle_inequality_and_homogeneity():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        x = HilbertVec(rng.standard_normal(8) * rng.uniform(0.1, 10.0))
        y = HilbertVec(rng.standard_normal(8) * rng.uniform(0.1, 10.0))
        c = float(rng.uniform(-5.0, 5.0))
        assert norm(x + y) <= (norm(x) + norm(y)) * (1 + 1e-12)
        assert norm(x * c) == pytest.approx(abs(c) * norm(x), rel=1e-12)


def test_hilbertvec_rejects_nonfinite_and_empty():
    with pytest.raises(InvalidInputError):
        HilbertVec([1.0, np.nan])
    with pytest.raises(InvalidInputError):
        HilbertVec([])
    with pytest.raises(InvalidInputError):
        norm([np.inf, 0.0])


def test_hilbertvec_is_immutable_and_checks_dimensions():
    v = HilbertVec([1.0, 2.0])
    with pytest.raises(ValueError):
        v.coeffs[0] = 5.0
    with pytest.raises(DimensionMismatchError):
        v + HilbertVec([1.0, 2.0, 3.0])
    assert (v + v) == 2 * v
    assert -v == HilbertVec([-1.0, -2.0])


def test_pth_moment_deterministic_ensemble():
    paths = np.tile(np.array([0.0, 2.0, 0.0]), (50, 3, 1))
    ens = PathEnsemble(np.array([0.0, 0.1, 0.2]), paths, seed=0)
    estimate, stderr = pth_moment(ens, 1, 4)
    assert estimate == 16.0
    assert stderr == 0.0


def test_pth_moment_gaussian_moments():
    rng = np.random.default_rng(11)
    samples = rng.standard_normal((100000, 1, 1))
    ens = PathEnsemble(np.array([0.0]), samples, seed=11)
    fourth, err4 = pth_moment(ens, 0, 4)
    second, err2 = pth_moment(ens, 0, 2)
    assert abs(fourth - 3.0) < 3 * err4
    assert abs(second - 1.0) < 3 * err2


def fourth_moment_error(paths: int, seed: int) -> float:
    samples = np.random.default_rng(seed).standard_normal((paths, 1, 1))
    estimate, _ = pth_moment(PathEnsemble(np.array([0.0]), samples, seed=seed), 0, 4)
    return abs(estimate - 3.0)


def test_estimator_error_shrinks_with_more_paths():
    few = np.mean([fourth_moment_error(10 ** 3, seed) for seed in range(10)])
    many = np.mean([fourth_moment_error(10 ** 5, seed) for seed in range(10)])
    assert many < few


def test_sum_moment_is_bounded_by_convexity():
    rng = np.random.default_rng(8)
    grid = np.array([0.0, 0.1, 0.2])
    for p in (2.0, 2.5, 3.0, 4.0):
        for _ in range(20):
            X = rng.standard_normal((200, 3, 4)) * rng.uniform(0.1, 5.0)
            Y = rng.standard_normal((200, 3, 4)) * rng.uniform(0.1, 5.0) + rng.uniform(-2.0, 2.0)
            lhs = moment_series(PathEnsemble(grid, X + Y, seed=0), p).estimate
            rhs = 2 ** (p - 1) * (moment_series(PathEnsemble(grid, X, seed=0), p).estimate
                                  + moment_series(PathEnsemble(grid, Y, seed=0), p).estimate)
            assert np.all(lhs <= rhs * (1 + 1e-12))


def test_pth_moment_preconditions():
    ens = PathEnsemble(np.array([0.0]), np.ones((2, 1, 1)), seed=0)
    with pytest.raises(InvalidInputError):
        pth_moment(ens, 0, 1.5)
    with pytest.raises(InvalidInputError):
        pth_moment(ens, 3, 2)


def test_single_path_has_zero_stderr():
    assert mean_and_stderr(np.array([2.5])) == (2.5, 0.0)


def test_invalid_paths_are_excluded():
    paths = np.ones((3, 2, 1))
    paths[1, 1, 0] = np.nan
    ens = PathEnsemble(np.array([0.0, 1.0]), paths, seed=0)
    assert ens.invalid_count == 1
    series = moment_series(ens, 2)
    assert np.allclose(series.estimate, 1.0)


def test_fully_blown_up_ensemble_reports_its_invalid_count():
    ens = PathEnsemble(np.array([0.0, 1.0]), np.full((4, 2, 1), np.nan), seed=0)
    with pytest.raises(BlowUpError) as err:
        pth_moment(ens, 0, 2)
    assert err.value.invalid == 4


def test_ensemble_grid_validation():
    with pytest.raises(InvalidInputError):
        PathEnsemble(np.array([0.0, 0.1, 0.3]), np.zeros((1, 3, 1)), seed=0)
    with pytest.raises(DimensionMismatchError):
        PathEnsemble(np.array([0.0, 0.1]), np.zeros((1, 3, 1)), seed=0)
    ens = PathEnsemble(np.array([0.0, 0.5, 1.0]), np.zeros((1, 3, 1)), seed=0)
    assert ens.index_of(1.0) == 2
    with pytest.raises(InvalidInputError):
        ens.index_of(0.25)


def test_sup_pnorm_constant_series():
    series = MomentSeries(np.arange(5.0), np.full(5, 16.0), np.zeros(5), p=4)
    assert sup_pnorm(series) == pytest.approx(2.0, rel=1e-15)


def test_sup_pnorm_picks_the_maximum_and_handles_a_singleton():
    assert sup_pnorm(MomentSeries(np.arange(3.0), np.array([0.0, 1.0, 0.5]), np.zeros(3), p=2)) == 1.0
    assert sup_pnorm(MomentSeries(np.array([0.0]), np.array([9.0]), np.zeros(1), p=2)) == 3.0


def test_moment_series_rejects_negative_estimates():
    with pytest.raises(InvalidInputError):
        MomentSeries(np.arange(2.0), np.array([1.0, -1.0]), np.zeros(2), p=2)


def test_format_real_uses_fifteen_significant_digits():
    assert format_real(0.0) == "0"
    assert format_real(1.0) == "1.00000000000000"
    assert format_real(1 / 3) == "0.333333333333333"
    assert format_real(123456.789) == "123456.789000000"


def test_write_csv_header_and_empty_nan(tmp_path):
    frame = pd.DataFrame({'iter': [1, 2], 'distance': [0.5, 0.25], 'ratio': [np.nan, 0.5]})
    text = write_csv(frame, tmp_path / "r.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "iter,distance,ratio"
    assert lines[1] == "1,0.500000000000000,"
    assert lines[2].endswith(",0.500000000000000")
