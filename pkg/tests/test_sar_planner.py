import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermofocus.fields import ArrayConfig, ExcitationVector, build_array, sar_from_field, superpose
from thermofocus.phantom import Cylinder, Grid, rasterize
from thermofocus.sar_planner import DegenerateSarError, PsoConfig, hotspot_average, pso_optimize, thq


def test_hotspot_uniform():
    sar = np.full((10, 10), 3.5)
    mask = np.ones((10, 10), bool)
    for f in (0.01, 0.3, 1.0):
        assert hotspot_average(sar, mask, f)[0] == 3.5


def test_hotspot_top_cell():
    sar = np.arange(1, 101, dtype=float).reshape(10, 10)
    avg, cells = hotspot_average(sar, np.ones((10, 10), bool), 0.01)
    assert avg == 100.0 and cells.tolist() == [99]


def test_hotspot_fraction_one_is_mean(rng):
    sar = rng.random((8, 8))
    mask = rng.random((8, 8)) > 0.3
    assert hotspot_average(sar, mask, 1.0)[0] == pytest.approx(sar[mask].mean(), rel=1e-14)


def test_hotspot_ties_go_to_lower_index():
    sar = np.zeros((5, 5))
    sar.ravel()[[3, 7, 20]] = 1.0
    _, cells = hotspot_average(sar, np.ones((5, 5), bool), 2 / 25)
    assert cells.tolist() == [3, 7]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_hotspot_monotone_in_fraction(seed, f1, f2):
    rng = np.random.default_rng(seed)
    sar = rng.random((12, 12))
    mask = np.ones((12, 12), bool)
    lo, hi = sorted((f1, f2))
    assert hotspot_average(sar, mask, lo)[0] >= hotspot_average(sar, mask, hi)[0]


def test_thq_hand_oracle():
    sar = np.array([[1.0, 2.0, 3.0], [4.0, 9.0, 5.0], [6.0, 7.0, 8.0]])
    gtv = np.zeros((3, 3), bool)
    gtv[1, 1] = True
    healthy = ~gtv
    # 8 healthy cells, ceil(0.25 * 8) = 2 hottest: 8 and 7
    r = thq(sar, gtv, healthy, 0.25)
    assert r.thq == 9.0 / 7.5
    assert r.v1_cell_count == 2


def test_thq_zero_hotspot_and_epsilon_cell():
    sar = np.zeros((4, 4))
    gtv = np.zeros((4, 4), bool)
    gtv[1:3, 1:3] = True
    sar[gtv] = 2.0
    with pytest.raises(DegenerateSarError):
        thq(sar, gtv, ~gtv)
    healthy = np.zeros((4, 4), bool)
    healthy[0, 0] = True
    sar[0, 0] = 1e-3
    assert thq(sar, gtv, healthy).thq == pytest.approx(2.0 / 1e-3)


def test_thq_rejects_overlap_and_empty():
    m = np.ones((3, 3), bool)
    with pytest.raises(ValueError):
        thq(np.ones((3, 3)), m, m)
    with pytest.raises(ValueError):
        thq(np.ones((3, 3)), np.zeros((3, 3), bool), m)


def test_thq_scale_invariance(rng):
    sar = rng.random((10, 10))
    gtv = np.zeros((10, 10), bool)
    gtv[4:6, 4:6] = True
    assert thq(5 * sar, gtv, ~gtv).thq == pytest.approx(thq(sar, gtv, ~gtv).thq, rel=1e-12)


@pytest.fixture(scope="module")
def small_problem():
    shapes = [Cylinder((0, 0, 0), 12e-3, "muscle"), Cylinder((4e-3, -3e-3, 0), 2.5e-3, "tumor", priority=1)]
    grid = Grid((28, 28), 1e-3, (-13.5e-3, -13.5e-3))
    ph = rasterize(shapes, grid)
    return ph, build_array(ArrayConfig(n_antennas=4, standoff=0.02), ph)


def test_pso_is_deterministic(small_problem):
    ph, fs = small_problem
    cfg = PsoConfig(max_evals=2000, seed=7)
    a = pso_optimize(fs, ph, ph.gtv, cfg)
    b = pso_optimize(fs, ph, ph.gtv, cfg)
    assert np.array_equal(a.weights.weights, b.weights.weights)
    assert a.evals == b.evals <= 2000


def test_pso_weights_scale_invariant(small_problem):
    ph, fs = small_problem
    res = pso_optimize(fs, ph, ph.gtv, PsoConfig(max_evals=1000))
    t1 = thq(sar_from_field(superpose(fs, res.weights), ph), ph.gtv, ph.healthy).thq
    t2 = thq(sar_from_field(superpose(fs, res.weights.scaled(2.0)), ph), ph.gtv, ph.healthy).thq
    assert t1 == pytest.approx(t2, rel=1e-12)
    assert res.report.thq == pytest.approx(t1, rel=1e-12)


def test_pso_history_non_increasing(small_problem):
    ph, fs = small_problem
    seen = []
    res = pso_optimize(fs, ph, ph.gtv, PsoConfig(max_evals=1200), monitor=lambda it, best: seen.append(best))
    assert len(seen) > 0
    assert all(b <= a for a, b in zip(seen, seen[1:]))
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_pso_parameterization(small_problem):
    ph, fs = small_problem
    res = pso_optimize(fs, ph, ph.gtv, PsoConfig(max_evals=800))
    w = res.weights
    assert w.phase[0] == 0.0
    assert np.all(w.amplitude <= 1.0 + 1e-15)
    res2 = pso_optimize(fs, ph, ph.gtv, PsoConfig(max_evals=800, optimize_amplitudes=False))
    assert np.allclose(res2.weights.amplitude, 1.0)


def test_pso_improves_on_uniform_excitation(small_problem):
    ph, fs = small_problem
    uniform = thq(sar_from_field(superpose(fs, ExcitationVector(np.ones(4))), ph), ph.gtv, ph.healthy).thq
    assert pso_optimize(fs, ph, ph.gtv, PsoConfig(max_evals=4000)).report.thq >= uniform


def test_pso_config_validation():
    with pytest.raises(ValueError):
        PsoConfig(swarm_size=1)
    with pytest.raises(ValueError):
        PsoConfig(swarm_size=40, max_evals=10)


def test_pso_empty_target(small_problem):
    ph, fs = small_problem
    with pytest.raises(ValueError):
        pso_optimize(fs, ph, np.zeros(ph.dims, bool))
