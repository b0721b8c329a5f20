import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import random_image, textured
from faceqe.errors import ValidationError
from faceqe.measures import (KINDS, MeasureValue, Region, edge_density, measure, measure_all, set_mean,
                             sharpness, spectral_energy)
from faceqe.raster import GrayImage, gaussian_blur

images = arrays(np.float64, st.tuples(st.integers(4, 24), st.integers(4, 24)), elements=st.floats(0, 1))


def checkerboard(n):
    return GrayImage((np.indices((n, n)).sum(axis=0) % 2).astype(float))


# --- edge density ------------------------------------------------------------

def test_edge_density_constant_is_zero():
    img = GrayImage(np.full((10, 12), 0.42))
    assert edge_density(img).value == 0.0
    assert edge_density(img, Region(2, 3, 5, 7)).value == 0.0


def test_edge_density_uniform_gradient_is_that_value():
    # horizontal ramp: interior Sobel magnitude is 8 * slope everywhere
    ramp = GrayImage(np.tile(np.arange(10) / 20, (10, 1)))
    assert edge_density(ramp, Region(1, 1, 8, 8)).value == pytest.approx(8 / 20, abs=1e-12)


def test_edge_density_matches_oracle(rng):
    img = random_image(rng, 16)
    assert abs(edge_density(img).value - oracles.edge_density(img.data)) <= 1e-12
    r = Region(3, 2, 11, 9)
    assert abs(edge_density(img, r).value - oracles.edge_density(img.data, (3, 2, 11, 9))) <= 1e-12


def test_region_validation():
    img = GrayImage(np.zeros((8, 8)))
    with pytest.raises(ValidationError):
        Region(4, 0, 2, 3)
    with pytest.raises(ValidationError):
        edge_density(img, Region(0, 0, 8, 3))
    assert Region(1, 2, 3, 5).area == 12
    assert Region.full(img).area == 64


@settings(max_examples=40, deadline=None)
@given(images, st.floats(0.01, 1.0))
def test_edge_density_scales_linearly(arr, c):
    img = GrayImage(arr)
    assert edge_density(GrayImage(c * arr)).value == pytest.approx(c * edge_density(img).value,
                                                                    rel=1e-9, abs=1e-12)


# --- sharpness ---------------------------------------------------------------

def test_sharpness_constant_and_checkerboard():
    assert sharpness(GrayImage(np.full((9, 9), 0.3))).value == pytest.approx(0.0, abs=1e-15)
    assert sharpness(checkerboard(8)).value > 0


def test_sharpness_matches_oracle(rng):
    img = random_image(rng, 8)
    assert abs(sharpness(img, 1.0).value - oracles.sharpness(img.data, 1.0)) <= 1e-12


# --- spectral energy ---------------------------------------------------------

@pytest.mark.parametrize("shape", [(16, 16), (20, 13)])
def test_spectral_energy_constant_is_exactly_zero(shape):
    for c in (0.0, 0.3, 0.7, 1.0):
        assert spectral_energy(GrayImage(np.full(shape, c)), 8).value == 0.0


def test_spectral_energy_horizontal_stripes_vertical_bins():
    rows = (np.arange(16) % 2).astype(float)
    img = GrayImage(np.repeat(rows[:, None], 16, axis=1))
    total = spectral_energy(img, 16).value
    f = np.abs(np.fft.fft2(img.data))
    assert total > 0
    assert total == pytest.approx(f[1:, 0].sum())  # nothing on the horizontal axis
    assert f[0, 1:].sum() == pytest.approx(0, abs=1e-9)


def test_spectral_energy_matches_oracle(rng):
    img = random_image(rng, 16)
    ref = oracles.spectral_energy(img.data, 8)
    assert spectral_energy(img, 8).value == pytest.approx(ref, rel=1e-9)


def test_spectral_energy_pads_by_replication(rng):
    img = random_image(rng, 10, 13)
    ref = oracles.spectral_energy(img.data, 4)
    assert spectral_energy(img, 4).value == pytest.approx(ref, rel=1e-9)


def test_spectral_energy_block_errors():
    with pytest.raises(ValidationError):
        spectral_energy(GrayImage(np.zeros((8, 8))), 16)
    with pytest.raises(ValidationError):
        spectral_energy(GrayImage(np.zeros((8, 8))), 0)


def test_spectral_energy_traversal_order_invariant(rng):
    # permuting whole blocks permutes the per-block terms only
    img = random_image(rng, 16)
    a = img.data
    swapped = np.block([[a[8:, 8:], a[8:, :8]], [a[:8, 8:], a[:8, :8]]])
    assert spectral_energy(GrayImage(swapped), 8).value == pytest.approx(spectral_energy(img, 8).value,
                                                                         rel=1e-12)


# --- set-level statistics ------------------------------------------------------

def test_set_mean_examples():
    assert set_mean([5.0]) == 5.0
    assert set_mean([1.0, 3.0]) == 2.0
    vals = list(np.random.default_rng(0).random(100))
    total = 0.0
    for v in vals:
        total += v
    assert abs(set_mean(vals) - total / 100) <= 1e-12


def test_set_mean_errors():
    with pytest.raises(ValidationError):
        set_mean([])
    with pytest.raises(ValidationError):
        set_mean([MeasureValue("sharpness", 1.0), MeasureValue("edge_density", 2.0)])
    with pytest.raises(ValidationError):
        set_mean([MeasureValue("sharpness", 1.0)], "edge_density")
    assert set_mean([MeasureValue("sharpness", 1.0), MeasureValue("sharpness", 2.0)], "sharpness") == 1.5


def test_measure_dispatch(rng):
    img = textured(rng, 32)
    got = measure_all(img)
    assert list(got) == list(KINDS)
    assert got["sharpness"] == sharpness(img).value
    with pytest.raises(ValidationError):
        measure(img, "contrast")


def test_measures_nonnegative_and_deterministic(rng):
    for _ in range(5):
        img = random_image(rng, 16)
        a, b = measure_all(img), measure_all(GrayImage(img.data.copy()))
        assert a == b and all(v >= 0 for v in a.values())


def test_blur_monotone_small_sample(rng):
    for _ in range(5):
        img = textured(rng, 32)
        eds = [edge_density(gaussian_blur(img, s)).value for s in (0, 1, 2)]
        shs = [sharpness(gaussian_blur(img, s)).value for s in (0, 1, 2)]
        assert eds[0] > eds[1] > eds[2] and shs[0] > shs[1] > shs[2]
        assert math.isfinite(sum(eds))
