import math

import numpy as np
import pytest

from thermofocus.gaussfit import GaussianFitError, GaussianParams, eval_gaussian, fit_gaussian, gaussian_sar
from thermofocus.phantom import AIR, Cylinder, Grid, Sphere

from conftest import box_phantom

A = 1.29e5
SIGMA = 18e-3
GRID = Grid((120, 120), 1e-3, (-59.5e-3, -59.5e-3))


def _check_recovery(p, a, r0, sigma, spacing):
    assert p.a == pytest.approx(a, rel=0.01)
    assert np.allclose(p.sigma, sigma, rtol=0.01)
    assert np.all(np.abs(np.subtract(p.r0, r0)) <= spacing / 2)


def test_recovers_synthetic_gaussian():
    truth = GaussianParams(A, (10.3e-3, -21.7e-3), (SIGMA, SIGMA))
    p, rms = fit_gaussian(eval_gaussian(truth, GRID), GRID)
    _check_recovery(p, A, truth.r0, truth.sigma, GRID.spacing)
    assert rms < 1e-6


def test_noisy_gaussian_centre_within_a_cell(rng):
    truth = GaussianParams(A, (4.6e-3, 8.2e-3), (SIGMA, 12e-3))
    e2 = eval_gaussian(truth, GRID) * (1 + 0.01 * rng.standard_normal(GRID.dims))
    p, _ = fit_gaussian(e2, GRID)
    assert np.all(np.abs(np.subtract(p.r0, truth.r0)) < GRID.spacing)


def test_uniform_map_is_degenerate():
    with pytest.raises(GaussianFitError):
        fit_gaussian(np.full(GRID.dims, 5.0), GRID)


def test_too_small_support():
    e2 = np.zeros(GRID.dims)
    e2[60, 60] = 1.0
    with pytest.raises(GaussianFitError, match="cells"):
        fit_gaussian(e2, GRID)


def test_fit_idempotent():
    truth = GaussianParams(A, (-7.4e-3, 3.1e-3), (15e-3, 21e-3))
    p, _ = fit_gaussian(eval_gaussian(truth, GRID), GRID)
    again, _ = fit_gaussian(eval_gaussian(p, GRID), GRID)
    assert again.a == pytest.approx(p.a, rel=1e-3)
    assert np.allclose(again.sigma, p.sigma, rtol=1e-3)
    assert np.allclose(again.r0, p.r0, rtol=0, atol=1e-3 * min(p.sigma))


def test_value_at_centre_and_one_sigma():
    c = GRID.coords_of((60, 70))
    g = eval_gaussian(GaussianParams(A, c, (SIGMA, SIGMA)), GRID)
    assert g[60, 70] == A
    assert g.max() == A
    g2 = eval_gaussian(GaussianParams(A, c, (4e-3, 9e-3)), GRID)
    assert g2[64, 70] == pytest.approx(A * math.exp(-0.5), rel=1e-12)


def test_max_below_a_when_off_cell():
    g = eval_gaussian(GaussianParams(A, (0.1e-3, 0.2e-3), (SIGMA, SIGMA)), GRID)
    assert g.max() < A


def test_shift_equivariance():
    p = GaussianParams(A, GRID.coords_of((50, 55)), (SIGMA, 10e-3))
    shifted = eval_gaussian(p.moved(GRID.coords_of((53, 51))), GRID)
    base = eval_gaussian(p, GRID)
    assert np.allclose(shifted[3:, :-4], base[:-3, 4:], rtol=1e-12, atol=0)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_gaussian(GaussianParams(A, (0, 0, 0), (1, 1, 1)), GRID)


def test_params_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        GaussianParams(0.0, (0, 0), (1, 1))
    with pytest.raises(ValueError):
        GaussianParams(1.0, (0, 0), (1, -1))
    p = GaussianParams(A, (0.018, -0.025), (SIGMA, SIGMA))
    q = GaussianParams.from_dict(p.to_dict())
    assert q.a == p.a and np.allclose(q.r0, p.r0, rtol=1e-15) and np.allclose(q.sigma, p.sigma, rtol=1e-15)


@pytest.fixture(scope="module")
def muscle_box():
    return box_phantom(
        [Cylinder((0, 0, 0), 9.5e-3, "muscle"), Cylinder((-6e-3, 0, 0), 1.5e-3, AIR, priority=1),
         Sphere((5e-3, 5e-3, 0), 1e-3, "tumor", priority=1)],
        dims=(21, 21),
    )


def test_gaussian_sar_hand_value(muscle_box):
    ph = muscle_box
    c = ph.grid.coords_of((10, 10))
    sar = gaussian_sar(GaussianParams(A, c, (SIGMA, SIGMA)), ph).values
    assert sar[10, 10] == pytest.approx(0.805 * A / (2 * 1090), rel=1e-12)
    assert sar[10, 10] == pytest.approx(47.64, abs=5e-3)


def test_gaussian_sar_zero_in_air(muscle_box):
    ph = muscle_box
    sar = gaussian_sar(GaussianParams(A, ph.grid.coords_of((4, 10)), (SIGMA, SIGMA)), ph).values
    assert (sar[ph.masks["internal_air"]] == 0).all()
    assert (sar[ph.masks["exterior"]] == 0).all()


def test_gaussian_sar_argmax_tracks_centre(muscle_box):
    ph = muscle_box
    muscle_only = ph.material == [t.name for t in ph.tissues].index("muscle")
    for ij in [(10, 10), (12, 8), (9, 13)]:
        sar = gaussian_sar(GaussianParams(A, ph.grid.coords_of(ij), (5e-3, 5e-3)), ph).values
        assert np.unravel_index(np.argmax(np.where(muscle_only, sar, -1)), ph.dims) == ij
