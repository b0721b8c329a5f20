import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import random_image, textured
from faceqe.enhance import (WEBER_EPS, DeblurParams, EnhancementPlan, Selection, WeberParams, apply_plan,
                            table2_rows, weberface, weberface_image, wiener_deblur, wiener_deblur_raw)
from faceqe.errors import ValidationError
from faceqe.geometry import EXP_A1, TEMPLATE_128
from faceqe.manifest import ManifestRecord
from faceqe.measures import sharpness
from faceqe.raster import GrayImage, convolve2d_raw, gaussian_blur, gaussian_kernel, save_image


def rec(i, **kw):
    return ManifestRecord(f"r{i:03d}", f"r{i:03d}.pgm", f"s{i % 7}", **kw)


def const_loader(value=0.5, size=128):
    img = GrayImage(np.full((size, size), value))
    return lambda r: img


# --- Weber-face --------------------------------------------------------------

def test_weberface_constant_is_zero():
    assert np.all(weberface(GrayImage(np.full((6, 6), 0.3))) == 0)


def test_weberface_hand_example():
    arr = np.full((3, 3), 0.4)
    arr[1, 1] = 0.8
    w = weberface(GrayImage(arr), smooth=False)
    assert w[1, 1] == pytest.approx(math.atan(2 * 8 * 0.4 / 0.8), abs=1e-12)
    assert w[1, 1] == pytest.approx(1.4464, abs=1e-4)


def test_weberface_matches_oracle(rng):
    img = random_image(rng, 8, 11)
    assert np.allclose(weberface(img), oracles.weberface(img.data), atol=1e-12)
    assert np.allclose(weberface(img, smooth=False), oracles.weberface(img.data, smooth=False), atol=1e-12)
    p = WeberParams(alpha=3.5, sigma=0.7)
    assert np.allclose(weberface(img, p), oracles.weberface(img.data, 3.5, 0.7), atol=1e-12)


def test_weberface_zero_pixel_uses_epsilon_floor():
    arr = np.zeros((3, 3))
    arr[0, 0] = 0.5
    w = weberface(GrayImage(arr), smooth=False)
    assert np.all(np.isfinite(w))
    assert w[1, 1] == pytest.approx(math.atan(2 * (-0.5) / WEBER_EPS))


@pytest.mark.parametrize("c", [0.25, 0.5, 1.0])
def test_weberface_scale_invariant(rng, c):
    img = textured(rng, 24)
    smoothed = convolve2d_raw(GrayImage(c * img.data), gaussian_kernel(1.0))
    mask = smoothed >= 2 * WEBER_EPS
    w1 = weberface(img)
    wc = weberface(GrayImage(c * img.data))
    assert mask.any()
    assert np.max(np.abs(w1 - wc)[mask]) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1)))
def test_weberface_bounded(arr):
    w = weberface(GrayImage(arr))
    assert np.all(np.abs(w) < math.pi / 2)
    d = weberface_image(GrayImage(arr)).data
    assert np.all((d >= 0) & (d <= 1))


def test_weber_params_validation():
    with pytest.raises(ValidationError):
        WeberParams(alpha=0)
    with pytest.raises(ValidationError):
        WeberParams(sigma=-1)
    with pytest.raises(ValidationError):
        WeberParams(neighborhood=4)


# --- Wiener deblur -----------------------------------------------------------

def test_deblur_constant_preserved_up_to_gain():
    nsr = 1e-3
    out = wiener_deblur_raw(GrayImage(np.full((20, 20), 0.4)), DeblurParams(1.0, nsr))
    # the DC gain of conj(H) / (|H|^2 + nsr) with H(0) = 1 is 1 / (1 + nsr)
    assert np.allclose(out * (1 + nsr), 0.4, atol=1e-6)


def test_deblur_energy_decreases_with_regularisation(rng):
    img = textured(rng, 32)
    energies = [float(np.sum(wiener_deblur_raw(img, DeblurParams(1.0, nsr)) ** 2))
                for nsr in (1e-3, 1e-1, 1.0, 10.0, 1e3)]
    assert all(a > b for a, b in zip(energies, energies[1:]))
    assert energies[-1] < 1e-2 * energies[0]


def test_deblur_improves_sharpness(rng):
    img = textured(rng, 48)
    blurred = gaussian_blur(img, 1.0)
    restored = wiener_deblur(blurred, DeblurParams(1.0, 1e-3))
    assert sharpness(restored).value > sharpness(blurred).value
    assert restored.shape == blurred.shape


def test_deblur_params_validation():
    with pytest.raises(ValidationError):
        DeblurParams(psf_sigma=0)
    with pytest.raises(ValidationError):
        DeblurParams(noise_to_signal=-1)


# --- plans -------------------------------------------------------------------

def test_plan_validation():
    with pytest.raises(ValidationError):
        EnhancementPlan("sharpen")
    with pytest.raises(ValidationError):
        EnhancementPlan("deblur", scope="some")
    with pytest.raises(ValidationError):
        EnhancementPlan("deblur", stage="during_crop")
    with pytest.raises(ValidationError):
        Selection("measure_above", "sharpness", float("inf"))
    with pytest.raises(ValidationError):
        Selection("measure_below", None, 1.0)
    with pytest.raises(ValidationError):
        Selection("pose_exceeds")


def test_select_all_weberface_enhances_everything():
    records = [rec(i) for i in range(5)]
    es = apply_plan(records, EnhancementPlan("weberface"), load=const_loader(0.3, 40),
                    crop=lambda r, img: img)
    assert es.remaining == [] and es.selected == records
    assert len(es.images) == 5
    # constant input -> W = 0 -> display value 0.5
    assert all(np.allclose(im.data, 0.5) for im in es.images.values())


def test_measure_above_is_strict():
    t = 10.0
    records = [rec(i) for i in range(3)]
    measures = {"r000": {"spectral_energy": t - 1}, "r001": {"spectral_energy": t},
                "r002": {"spectral_energy": t + 1}}
    plan = EnhancementPlan("weberface", Selection("measure_above", "spectral_energy", t))
    es = apply_plan(records, plan, measures, with_images=False)
    assert [r.record_id for r in es.selected] == ["r002"]
    below = EnhancementPlan("deblur", Selection("measure_below", "spectral_energy", t))
    es = apply_plan(records, below, measures, with_images=False)
    assert [r.record_id for r in es.selected] == ["r000"]


def test_measure_below_200_records_set_arithmetic():
    rng = np.random.default_rng(11)
    records = [rec(i) for i in range(200)]
    measures = {r.record_id: {"edge_density": float(v)} for r, v in zip(records, rng.random(200))}
    mean = sum(m["edge_density"] for m in measures.values()) / 200
    frontal = {r.record_id for r in records[::3]}
    plan = EnhancementPlan("deblur", Selection("measure_below", "edge_density", mean))
    es = apply_plan(records, plan, measures, frontalized=frontal, with_images=False)
    brute = [r for r in records if measures[r.record_id]["edge_density"] < mean]
    assert es.selected == brute
    c = es.counts()
    assert c["set1"] == sum(1 for r in brute if r.record_id in frontal)
    assert c["set2"] == sum(1 for r in brute if r.record_id not in frontal)
    assert c["set1"] + c["set2"] + c["set3"] == 200
    labels = {e.record.record_id: e.set_label for e in es.entries}
    assert len(labels) == 200


def test_missing_measure_errors():
    plan = EnhancementPlan("deblur", Selection("measure_below", "sharpness", 0.1))
    with pytest.raises(ValidationError):
        apply_plan([rec(0)], plan, {"r000": {"edge_density": 1.0}}, with_images=False)
    with pytest.raises(ValidationError):
        apply_plan([rec(0)], plan, None, with_images=False)


def test_external_operator_requires_enhanced_path(tmp_path):
    plan = EnhancementPlan("external", Selection("pose_exceeds", pose=EXP_A1))
    with pytest.raises(ValidationError):
        apply_plan([rec(0, pose=(0.0, 0.0, 1.0))], plan)
    save_image(GrayImage(np.full((64, 64), 0.9)), tmp_path / "front.pgm")
    records = [rec(0, pose=(0.0, 0.0, 1.0), enhanced_path="front.pgm", base_dir=tmp_path),
               rec(1, pose=(0.0, 0.0, 0.0))]
    es = apply_plan(records, plan, load=const_loader(0.2), crop=lambda r, img: img)
    assert np.allclose(es.images["r000"].data, 0.9, atol=1 / 255)
    assert es.images["r000"].shape == (128, 128)
    assert np.allclose(es.images["r001"].data, 0.2)


def test_scope_controls_flow():
    records = [rec(i) for i in range(4)]
    measures = {r.record_id: {"sharpness": float(i)} for i, r in enumerate(records)}
    sel = Selection("measure_above", "sharpness", 1.5)
    only = apply_plan(records, EnhancementPlan("deblur", sel, "selected_only"), measures,
                      load=const_loader(), crop=lambda r, img: img)
    both = apply_plan(records, EnhancementPlan("deblur", sel, "selected_plus_remaining"), measures,
                      load=const_loader(), crop=lambda r, img: img)
    assert [r.record_id for r in only.feature_records] == ["r002", "r003"]
    assert sorted(only.images) == ["r002", "r003"]
    assert both.feature_records == records and len(both.images) == 4


def test_stage_order_matters():
    # a scene with a strong off-face edge: normalising before cropping sees it, after does not
    rng = np.random.default_rng(5)
    arr = 0.2 + 0.6 * rng.random((160, 160))
    lm = TEMPLATE_128 + 16
    r = rec(0, landmarks=tuple(map(tuple, lm)))
    img = GrayImage(arr)
    load = lambda _r: img  # noqa: E731
    before = apply_plan([r], EnhancementPlan("weberface", stage="before_crop"), load=load)
    after = apply_plan([r], EnhancementPlan("weberface", stage="after_crop"), load=load)
    a, b = before.images["r000"].data, after.images["r000"].data
    assert a.shape == b.shape == (128, 128)
    assert not np.allclose(a, b)
    # away from the crop border the two agree closely (pure translation crop)
    assert np.max(np.abs(a[8:-8, 8:-8] - b[8:-8, 8:-8])) < 1e-9


def test_workers_do_not_change_output():
    rng = np.random.default_rng(2)
    imgs = {f"r{i:03d}": GrayImage(rng.random((128, 128))) for i in range(6)}
    records = [rec(i) for i in range(6)]
    plan = EnhancementPlan("deblur")
    a = apply_plan(records, plan, load=lambda r: imgs[r.record_id], crop=lambda r, im: im, workers=1)
    b = apply_plan(records, plan, load=lambda r: imgs[r.record_id], crop=lambda r, im: im, workers=4)
    assert list(a.images) == list(b.images)
    assert all(a.images[k] == b.images[k] for k in a.images)


def test_table2_rows():
    rows = table2_rows("b1", {"middle": {"set1": 12, "set2": 7, "set3": 30}})
    assert rows[0][-1] == "49"
