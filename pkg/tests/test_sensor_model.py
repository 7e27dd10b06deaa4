import math

import numpy as np
import pytest
from scipy.optimize import brentq

from pblsim.geometry import RangeImage, column_azimuth
from pblsim.sensor_model import (DistanceParams, IntensityParams, LossWeights, MaskSet, analyze_statistics,
                                 apply_model, build_drop_mask, build_intensity_mask, clamp_events, dist_far,
                                 dist_near, loss_intensity, loss_laser, loss_reflectivity, loss_total,
                                 n_distance, n_incidence, sigmoid_blend)


# --- distance falloff ------------------------------------------------------

def test_dist_far_identity_at_d_near(rng):
    for _ in range(100):
        p = DistanceParams(s=rng.uniform(0, 1), q=rng.uniform(0.1, 5), d_near=rng.uniform(0, 10))
        assert dist_far(p.d_near, p) == 1.0


def test_dist_far_quadratic():
    p = DistanceParams(s=1.0, q=1.0, d_near=0.0)
    assert dist_far(1.0, p) == 0.25


def test_dist_far_clamped():
    p = DistanceParams(s=1.0, q=2.0, d_near=0.0)
    assert dist_far(1.0, p) == 0.0
    assert dist_far(5.0, p) == 0.0


def test_dist_far_q1_inverse_square(rng):
    p = DistanceParams(s=0.07, q=1.0, d_near=2.5)
    d = np.linspace(0.0, 80.0, 2001)
    delta = p.s * (d - p.d_near) + 1.0
    assert np.abs(dist_far(d, p) - delta ** -2.0).max() < 1e-12


def test_dist_far_delta_floor_counts():
    p = DistanceParams(s=1.0, q=1.0, d_near=5.0)
    before = clamp_events["delta_d"]
    v = dist_far(1.0, p)
    assert np.isfinite(v) and clamp_events["delta_d"] == before + 1


def test_dist_near_fractional():
    assert dist_near(0.0, DistanceParams(s_eta=0.7, q_eta=2.3)) == 0.0
    assert dist_near(0.5, DistanceParams(s_eta=1.0, q_eta=1.0)) == 0.5


def test_dist_near_defocus():
    p = DistanceParams(near_model="lens_defocus", lens_scale=0.5, lens_offset=0.0)
    assert dist_near(0.0, p) == 0.0
    assert dist_near(50.0, p) == pytest.approx(1.0, abs=1e-12)
    assert 0 <= dist_near(1.0, p) < 1


def test_sigmoid():
    assert sigmoid_blend(2.0, DistanceParams(d_near=2.0)) == 0.5
    assert sigmoid_blend(3.0, DistanceParams(d_near=2.0, k_steep=1.0)) == pytest.approx(1 / (1 + math.exp(-1)))
    assert sigmoid_blend(3.0, DistanceParams(d_near=2.0, k_steep=200.0)) == pytest.approx(1.0, abs=1e-12)


def test_n_distance_at_d_near():
    p = DistanceParams(s=0.05, q=1.5, d_near=3.0)
    assert n_distance(3.0, p) == pytest.approx(0.5 + 0.5 * dist_near(3.0, p), abs=1e-15)


def test_n_distance_far_limit():
    p = DistanceParams(s=0.05, q=1.0, d_near=3.0, k_steep=50.0)
    assert n_distance(20.0, p) == pytest.approx(dist_far(20.0, p), rel=1e-12)


def test_n_distance_continuity():
    p = DistanceParams(s=0.05, q=1.5, d_near=3.0)
    # the fractional near term has unbounded slope at 0, so check that jumps shrink with the step
    jumps = []
    for n in (8001, 800001):
        d = np.linspace(0.0, 80.0, n)
        jumps.append(np.abs(np.diff(n_distance(d, p))).max())
    assert jumps[1] < jumps[0] / 5
    d = np.linspace(2.9, 3.1, 200001)
    assert np.abs(np.diff(n_distance(d, p))).max() < 1e-5


def test_n_distance_single_maximum():
    p = DistanceParams(s=0.05, q=1.5, d_near=3.0)
    d = np.linspace(0.0, 80.0, 8001)
    n = n_distance(d, p)
    k = int(np.argmax(n))
    assert 0 < k < len(d) - 1
    assert np.all(np.diff(n[:k + 1]) > 0)
    assert np.all(np.diff(n[k:]) <= 0)


# --- incidence -------------------------------------------------------------

def test_incidence_head_on(rng):
    p = IntensityParams(incidence_a=4.0, incidence_b=1.0)
    assert np.all(n_incidence(1.0, rng.uniform(0, 1, 20), p) == 1.0)


def test_incidence_zero_reflectivity():
    p = IntensityParams(incidence_a=4.0, incidence_b=1.0)
    assert n_incidence(0.3, 0.0, p) == 1.0
    assert n_incidence(0.0, 0.0, p) == 1.0


def test_incidence_lambert():
    p = IntensityParams(incidence_a=4.0, incidence_b=1.0, reflect_scale=1.0)
    assert n_incidence(0.5, 0.25, p) == 0.5


def test_incidence_bounds(rng):
    for _ in range(50):
        p = IntensityParams(incidence_a=rng.uniform(0, 10), incidence_b=rng.uniform(0.1, 3),
                            reflect_scale=rng.uniform(0, 5))
        v = n_incidence(rng.uniform(0, 1, 100), rng.uniform(0, 1, 100), p)
        assert np.all((v >= 0) & (v <= 1))


# --- full chain ------------------------------------------------------------

def test_apply_model_identity():
    p = IntensityParams.identity(4)
    assert apply_model(0.37, 20.0, 0.4, 0.9, 2, p, effects={"incidence", "laser"}) == 0.37


def test_apply_model_zero():
    p = IntensityParams(laser_powers=np.full(4, 1.2))
    assert apply_model(0.0, 20.0, 0.4, 0.9, 1, p) == 0.0


def test_apply_model_product():
    dp = DistanceParams(s=0.05, q=1.5, d_near=3.0)
    d_half = brentq(lambda d: n_distance(d, dp) - 0.5, 3.0, 28.0)
    p = IntensityParams(dp, np.array([1.0, 1.1]), 4.0, 1.0)
    assert apply_model(0.8, d_half, 1.0, 0.5, 1, p) == pytest.approx(0.44, abs=1e-12)


# --- losses ----------------------------------------------------------------

def test_loss_intensity_cases():
    m = MaskSet.empty(2, 2)
    gt = np.full((2, 2), 0.5)
    valid = np.ones((2, 2), bool)
    assert loss_intensity(gt, gt, m, valid)[0] == 0.0
    one = np.zeros((2, 2), bool)
    one[0, 0] = True
    pred = gt.copy()
    pred[0, 0] += 0.1
    assert loss_intensity(pred, gt, m, one)[0] == pytest.approx(0.01)
    full = MaskSet(np.ones((2, 2), bool), np.zeros((2, 2), bool))
    assert loss_intensity(pred, gt, full, valid) == (0.0, 0)


def test_loss_intensity_shallow_mask():
    m = MaskSet.empty(1, 2, incidence_threshold=math.radians(80))
    pred = np.array([[0.6, 0.9]])
    gt = np.array([[0.5, 0.5]])
    cos = np.array([[1.0, math.cos(math.radians(85))]])
    loss, n = loss_intensity(pred, gt, m, np.ones((1, 2), bool), cos)
    assert n == 1 and loss == pytest.approx(0.01)


def test_loss_laser():
    assert loss_laser(np.ones(64)) == 0.0
    assert loss_laser(np.full(64, 0.5)) == 0.0
    assert loss_laser([1.5, 1.0]) == 0.25


def test_loss_reflectivity():
    assert loss_reflectivity(np.array([0.0, 0.0, 0.1]), 0.0) == 0.0
    assert loss_reflectivity(np.array([0.05, 0.1, 0.3]), 0.2) == pytest.approx(0.1)
    assert loss_reflectivity(np.array([0.4, 0.5, 0.9]), 0.2) == 0.0
    # lower median for even counts
    assert loss_reflectivity(np.array([0.1, 0.3]), 0.2) == pytest.approx(0.1)


def test_loss_total():
    zero = LossWeights(0, 0, 0, 0, 0)
    assert loss_total({"intensity": 0.5}, zero) == 0.0
    w = LossWeights(depth=0, intensity=2.0, raydrop=0, reflectivity=0, laser=0)
    assert loss_total({"intensity": 0.01, "depth": 3.0}, w) == pytest.approx(0.02)
    assert loss_total({k: 0.0 for k in w.as_dict()}, LossWeights()) == 0.0


def test_loss_total_skips_zero_weight():
    def boom():
        raise AssertionError("evaluated")
    w = LossWeights(depth=1.0, intensity=0.0, raydrop=0, reflectivity=0, laser=0)
    assert loss_total({"depth": 1.5, "intensity": boom}, w) == 1.5


def test_loss_total_linear(rng):
    comps = {k: float(rng.uniform(0, 1)) for k in LossWeights().as_dict()}
    w = LossWeights()
    a = loss_total(comps, w)
    doubled = dict(comps, intensity=2 * comps["intensity"])
    assert loss_total(doubled, w) - a == pytest.approx(w.intensity * comps["intensity"])


# --- masks -----------------------------------------------------------------

def _frame(depth, inten=None):
    depth = np.asarray(depth, dtype=np.float64)
    return RangeImage(depth, np.full(depth.shape, 0.5) if inten is None else inten)


def test_drop_mask_cases():
    frames = [_frame([[0.0, 5.0, 5.0 if k % 2 else 0.0]]) for k in range(10)]
    assert build_drop_mask(frames, 0.9)[0, 0]
    assert not build_drop_mask(frames, 0.9)[0, 1]
    assert build_drop_mask(frames, 0.5)[0, 2]
    assert not build_drop_mask(frames, 0.51)[0, 2]


def test_drop_mask_order_invariant(rng):
    frames = [_frame(np.where(rng.random((4, 6)) < 0.5, 0.0, 3.0)) for _ in range(7)]
    a = build_drop_mask(frames, 0.4)
    assert np.array_equal(a, build_drop_mask(frames[::-1], 0.4))


def test_intensity_mask_cases():
    z = [_frame([[5.0, 5.0]], np.array([[0.0, 0.3]])) for _ in range(4)]
    m = build_intensity_mask(z, 0.9)
    assert m[0, 0] and not m[0, 1]


def test_intensity_mask_bands():
    H, W = 8, 256
    az = np.degrees(column_azimuth(np.arange(W), W))
    band = (np.abs(np.abs(az) - 45.0) < 3.0)
    frames = []
    for _ in range(5):
        inten = np.full((H, W), 0.4)
        inten[:, band] = 0.0
        frames.append(_frame(np.full((H, W), 10.0), inten))
    m = build_intensity_mask(frames, 0.9)
    assert np.array_equal(m, np.broadcast_to(band, (H, W)))


# --- statistics ------------------------------------------------------------

def test_stats_constant():
    depth = np.linspace(1, 50, 64 * 32).reshape(32, 64)
    cos = np.linspace(0.05, 1, 64 * 32).reshape(32, 64)
    t = analyze_statistics([(_frame(depth, np.full(depth.shape, 0.3)), cos)], [0, 10, 20, 60],
                           np.radians([0, 30, 60, 90]))
    occ = t.count > 0
    assert np.allclose(t.mean[occ], 0.3)
    assert np.all(np.isnan(t.mean[~occ]))


def test_stats_cosine_law(rng):
    edges = np.radians(np.arange(0, 91, 10))
    ang = rng.uniform(0, math.pi / 2, (200, 200))
    cos = np.cos(ang)
    img = _frame(np.full(ang.shape, 10.0), cos)
    t = analyze_statistics([(img, cos)], [0, 100], edges).by_angle()
    centers = np.cos((edges[:-1] + edges[1:]) / 2)
    assert np.all(np.abs(t.mean.reshape(-1) / centers - 1) < 0.02)


def test_stats_trends(rng):
    d = rng.uniform(2, 60, (200, 200))
    ang = rng.uniform(0, math.radians(85), (200, 200))
    cos = np.cos(ang)
    img = _frame(d, np.clip(cos * (2.0 / d) ** 2, 0, 1))
    t = analyze_statistics([(img, cos)], [2, 10, 20, 30, 40, 60], np.radians([0, 20, 40, 60, 85]))
    by_d = t.by_distance().mean.reshape(-1)
    by_a = t.by_angle().mean.reshape(-1)
    assert np.all(np.diff(by_d) < 0) and np.all(np.diff(by_a) < 0)


def test_stats_csv(tmp_path):
    img = _frame(np.full((2, 2), 5.0), np.full((2, 2), 0.2))
    t = analyze_statistics([(img, np.ones((2, 2)))], [0, 10], [0, 1])
    t.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,angle_lo,angle_hi,count,mean,std"
    assert lines[1].split(",")[4] == "4"
