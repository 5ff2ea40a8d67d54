import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landscape.data import eval_loss
from landscape.directions import gaussian_direction, normalize
from landscape.models import ModelSpec, build_model
from landscape.params import axpy
from landscape.scan import (classify_curve, count_stationary, random_guess_threshold, scan_1d,
                            scan_2d, turning_points, uniform_grid)

GRID = uniform_grid(-1, 1, 41)


def test_threshold_is_log_classes():
    assert random_guess_threshold(10) == pytest.approx(2.302585, abs=1e-6)
    assert random_guess_threshold(2) == math.log(2)
    with pytest.raises(ValueError):
        random_guess_threshold(1)


def test_uniform_grid_contains_exact_zero():
    assert 0.0 in uniform_grid(-1, 1, 41)
    assert 0.0 in uniform_grid(-1, 2, 31)
    with pytest.raises(ValueError):
        uniform_grid(1, 1, 5)


@pytest.mark.parametrize("y,n", [([1, 2, 1], 1), ([1, 2, 3, 4], 0), ([3, 1, 3, 1, 3], 3),
                                 ([1, 1, 1, 1], 0), ([2, 1, 1, 2], 0)])
def test_count_stationary_examples(y, n):
    assert count_stationary(np.array(y, dtype=float)) == n


def test_count_stationary_needs_three_points():
    with pytest.raises(ValueError):
        count_stationary(np.array([1.0, 2.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=4), st.integers(8, 40))
def test_refinement_never_loses_extrema(coeffs, n):
    # nested grids on a smooth polynomial; the irrational shift avoids exact ties,
    # which the strict stationary rule treats as plateaus
    coarse = np.linspace(-1, 1, n + 1)
    fine = np.linspace(-1, 1, 2 * n + 1)
    f = np.polynomial.Polynomial([0.0] + coeffs, domain=[-1 - 1 / np.pi ** 4, 1])
    assert count_stationary(f(fine)) >= count_stationary(f(coarse))


@pytest.mark.parametrize("f,label", [
    (lambda x: x ** 2, "v-basin"),
    (lambda x: (x - 0.6) ** 2, "v-side"),
    (lambda x: -x ** 2 + 1.0, "w-peak"),
    (lambda x: (x ** 2 - 0.5) ** 2, "w-peak"),
    (lambda x: np.minimum(x ** 2, (x - 0.7) ** 2 + 0.05), "w-basin"),
    (lambda x: np.cos(5 * np.pi * x) + 1.1 + 0.2 * x ** 2, "other"),
])
def test_classify_synthetic_shapes(f, label):
    y = f(GRID) * 0.5
    assert classify_curve(y, GRID, threshold=10.0) == label


def test_classify_vvv_basin():
    y = np.minimum.reduce([GRID ** 2, (GRID - 0.6) ** 2, (GRID + 0.6) ** 2])
    assert classify_curve(y, GRID, threshold=10.0) == "vvv-basin"


def test_structure_above_threshold_is_ignored():
    y = 3.0 + np.cos(4 * np.pi * GRID)  # oscillates entirely above ln 10
    assert classify_curve(y, GRID, threshold=math.log(10)) == "other"
    clipped = np.where(np.abs(GRID) < 0.2, GRID ** 2, 5.0 + np.sin(20 * GRID))
    assert classify_curve(clipped, GRID, threshold=math.log(10)) == "v-basin"


def test_classification_is_pure():
    y = np.random.default_rng(0).random(41)
    assert classify_curve(y, GRID, 10.0) == classify_curve(y.copy(), GRID.copy(), 10.0)


def test_turning_points_respect_prominence():
    y = np.array([0.0, 1.0, 0.99, 1.0, 0.0])
    assert turning_points(y, 0.5) == [(1, "max")] or turning_points(y, 0.5) == [(3, "max")]
    assert [k for _, k in turning_points(y, 0.005)] == ["max", "min", "max"]


# ---------------------------------------------------------------- model scans

def test_zero_direction_gives_constant_curve(tiny, tiny_data):
    model, params = tiny
    c = scan_1d(model, params, None, params * 0.0, GRID, tiny_data)
    assert np.all(c.losses == c.losses[0])
    assert c.stationary_count == 0 and c.label == "other"


def test_base_point_is_exact_and_endpoints_match(tiny, tiny_data):
    model, params = tiny
    eps = gaussian_direction(params.manifest, seed=1)
    c = scan_1d(model, params, None, eps, GRID, tiny_data, bn_mode="NoUpBN")
    assert c.loss_at(0.0) == eval_loss(model, params, None, tiny_data)[0]
    assert c.losses[-1] == eval_loss(model, axpy(params, 1.0, eps.vector), None, tiny_data)[0]


def test_opposite_directions_mirror(tiny, tiny_data):
    model, params = tiny
    eps = gaussian_direction(params.manifest, seed=2).vector
    a = scan_1d(model, params, None, eps, GRID, tiny_data)
    b = scan_1d(model, params, None, -eps, GRID, tiny_data)
    np.testing.assert_array_equal(a.losses, b.losses[::-1])


def test_threaded_scan_is_identical(tiny, tiny_data):
    model, params = tiny
    eps = gaussian_direction(params.manifest, seed=3)
    a = scan_1d(model, params, None, eps, GRID, tiny_data)
    b = scan_1d(model, params, None, eps, GRID, tiny_data, workers=4)
    np.testing.assert_array_equal(a.losses, b.losses)


def test_scan_rejects_bad_grids(tiny, tiny_data):
    model, params = tiny
    eps = gaussian_direction(params.manifest)
    with pytest.raises(ValueError):
        scan_1d(model, params, None, eps, [0.0, -1.0, 1.0], tiny_data)
    with pytest.raises(ValueError):
        scan_1d(model, params, None, eps, [0.5, 1.0, 1.5], tiny_data)
    with pytest.raises(ValueError):
        scan_1d(model, params, None, eps, GRID, tiny_data, bn_mode="mixed")


def test_scan_2d_row_equals_1d_scan(tiny, tiny_data):
    model, params = tiny
    e1 = gaussian_direction(params.manifest, seed=4)
    e2 = gaussian_direction(params.manifest, seed=5)
    g = uniform_grid(-1, 1, 7)
    surf = scan_2d(model, params, None, e1, e2, g, g, tiny_data)
    line = scan_1d(model, params, None, e1, g, tiny_data)
    np.testing.assert_array_equal(surf.losses[surf.center[0]], line.losses)
    assert surf.losses.shape == (7, 7)
    flat = scan_2d(model, params, None, e1, e2.vector * 0.0, g, g, tiny_data)
    assert np.all(flat.losses == line.losses[None, :])


def test_bn_scan_modes():
    spec = ModelSpec("convnet", (1, 4, 4), 2, channels=(2,), use_bn=True)
    model, params, bn = build_model(spec, 0)
    from landscape.data import Dataset
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(24, 1, 4, 4)), rng.integers(0, 2, 24), 2)
    eps = gaussian_direction(params.manifest, seed=1)
    g = uniform_grid(-1, 1, 5)
    up = scan_1d(model, params, bn, eps, g, ds, "UpBN", n_bn_batches=2)
    no = scan_1d(model, params, bn, eps, g, ds, "NoUpBN")
    assert no.loss_at(0.0) == eval_loss(model, params, bn, ds)[0]
    assert np.all(np.isfinite(up.losses)) and not np.array_equal(up.losses, no.losses)


def test_trained_model_gaussian_scans_are_v_basins(desk_model, desk, desk_data):
    theta = desk.final.params
    sub = desk_data.head(1000)
    labels = [scan_1d(desk_model, theta, None,
                      normalize(gaussian_direction(theta.manifest, seed=s), theta), GRID, sub).label
              for s in range(5)]
    assert labels.count("v-basin") >= 5 * 0.9
