import math

import numpy as np
import pytest

from pblsim.calibration import (CalibProblem, CalibrationDiverged, FreeMask, absorb_gauge, calibrate,
                                gauge_basis, init_from_rings, recover_rings, reprojection_loss,
                                reprojection_loss_grad, reprojection_residuals)
from pblsim.geometry import PointCloud, SensorIntrinsics, UnitIntrinsics
from pblsim.io.synth import hdl64_like, raw_scan_order, street_scene, synthesize_scan
from pblsim.optim import OptimizerConfig

W = 256


@pytest.fixture(scope="module")
def truth():
    return hdl64_like(W, seed=3)


@pytest.fixture(scope="module")
def scans(truth):
    spec = street_scene(truth, n_frames=2, shutter=False)
    return [synthesize_scan(spec, k) for k in range(2)]


@pytest.fixture(scope="module")
def frames(scans):
    return [recover_rings(raw_scan_order(s), W, 64) for s in scans]


def _perturbed(truth, scale=0.1):
    units = [UnitIntrinsics(u.fov * (1 + scale), u.fov_offset * (1 - scale), u.z_offset * (1 + scale),
                            u.row_start, u.row_end) for u in truth.units]
    return truth.replace(units=units, diode_offsets=np.zeros(truth.height))


# --- ring recovery ---------------------------------------------------------

def test_recover_rings_two_rings():
    phi = np.linspace(math.pi - 0.1, -math.pi + 0.1, 8)
    ring = np.stack([np.cos(phi), np.sin(phi), np.zeros(8)], axis=1)
    pts = np.concatenate([ring * 5, ring * 6 + [0, 0, 0.1]])
    out = recover_rings(PointCloud(pts, np.zeros(16)), 8, 4)
    assert np.array_equal(out.ring, [0] * 8 + [1] * 8)
    assert np.array_equal(out.col, np.arange(16) % 8)


def test_recover_rings_single():
    phi = np.linspace(1.0, -1.0, 10)
    pts = np.stack([np.cos(phi), np.sin(phi), np.zeros(10)], axis=1)
    assert np.all(recover_rings(PointCloud(pts, np.zeros(10)), 32).ring == 0)


def test_recover_rings_errors():
    phi = np.tile(np.linspace(3.0, -3.0, 5), 3)
    pts = np.stack([np.cos(phi), np.sin(phi), np.zeros(15)], axis=1)
    with pytest.raises(ValueError, match="ring overflow"):
        recover_rings(PointCloud(pts, np.zeros(15)), 8, 2)
    with pytest.raises(ValueError):
        recover_rings(PointCloud(np.zeros((0, 3)), np.zeros(0)), 8, 2)


def test_recover_rings_fixture(scans, frames):
    # synthetic HDL-64E-like frame stands in for a recorded one
    for s, f in zip(scans, frames):
        counts = np.bincount(f.ring, minlength=64)
        assert len(counts) == 64
        assert np.all((counts >= W * 0.5) & (counts <= W))
        order = np.lexsort((s.cloud.col, s.cloud.ring))
        assert np.array_equal(f.ring, s.cloud.ring[order])
        assert np.array_equal(f.col, s.cloud.col[order])


# --- loss ------------------------------------------------------------------

def test_loss_zero_at_truth(truth, frames):
    assert reprojection_loss(truth, frames) < 1e-12


def test_loss_offset_bump(truth, frames):
    d = truth.diode_offsets.copy()
    d[17] += 1e-3
    assert reprojection_loss(truth.replace(diode_offsets=d), frames) > 0


def test_uncalibrated_frame(truth):
    with pytest.raises(ValueError, match="uncalibrated frame: run recover_rings"):
        reprojection_loss(truth, [PointCloud(np.ones((3, 3)), np.zeros(3))])


def _brute_force(intr, frames, w):
    """Per-point loop with the residual channels written out longhand."""
    total, n = 0.0, 0
    for c in frames:
        for p, r, col in zip(c.positions, c.ring, c.col):
            u = [u for u in intr.units if u.row_start <= r < u.row_end][0]
            rho = math.hypot(p[0], p[1])
            phi = math.atan2(p[1], p[0])
            dz = p[2] - u.z_offset
            theta = math.atan2(dz, rho) + u.fov_offset + intr.diode_offsets[r]
            ri = u.row_start + (1 - theta / u.fov) * u.rows - (r + 0.5)
            jc = (0.5 - phi / (2 * math.pi)) * intr.width - (col + 0.5)
            rj = (jc + intr.width / 2) % intr.width - intr.width / 2
            e = (1 - (r + 0.5 - u.row_start) / u.rows) * u.fov - u.fov_offset - intr.diode_offsets[r]
            rng = math.hypot(rho, dz)
            q = np.array([rng * math.cos(e) * math.cos(phi), rng * math.cos(e) * math.sin(phi),
                          u.z_offset + rng * math.sin(e)])
            total += w[0] * float(np.sum((q - p) ** 2)) + w[2] * ri * ri + w[3] * rj * rj
            n += 1
    return total / n


def test_loss_brute_force(truth, frames):
    sub = [f.subset(np.arange(len(f)) % 37 == 0) for f in frames]
    d = truth.diode_offsets.copy()
    d[5] += 2e-3
    d[40] -= 1e-3
    cand = _perturbed(truth, 0.03).replace(diode_offsets=d)
    w = (1.0, 0.0, 0.7, 1.3)
    ref = _brute_force(cand, sub, w)
    assert reprojection_loss(cand, sub, w) == pytest.approx(ref, rel=1e-10)
    res = reprojection_residuals(cand, sub)
    per_point = w[0] * res["d"] ** 2 + w[2] * res["i"] ** 2 + w[3] * res["j"] ** 2
    assert per_point.mean() == pytest.approx(ref, rel=1e-10)


def test_gradient_matches_fd(truth, frames):
    sub = [f.subset(np.arange(len(f)) % 11 == 0) for f in frames]
    cand = _perturbed(truth, 0.02)
    _, g = reprojection_loss_grad(cand, sub)
    h = 1e-7
    for k in range(2):
        for name in ("fov", "fov_offset", "z_offset"):
            def shifted(s):
                u = cand.units[k]
                vals = dict(fov=u.fov, fov_offset=u.fov_offset, z_offset=u.z_offset)
                vals[name] += s
                units = list(cand.units)
                units[k] = UnitIntrinsics(vals["fov"], vals["fov_offset"], vals["z_offset"],
                                          u.row_start, u.row_end)
                return reprojection_loss(cand.replace(units=units), sub)
            fd = (shifted(h) - shifted(-h)) / (2 * h)
            assert g[name][k] == pytest.approx(fd, rel=1e-4, abs=1e-9)
    for r in (0, 31, 32, 63):
        def shifted(s):
            d = cand.diode_offsets.copy()
            d[r] += s
            return reprojection_loss(cand.replace(diode_offsets=d), sub)
        fd = (shifted(h) - shifted(-h)) / (2 * h)
        assert g["diode_offsets"][r] == pytest.approx(fd, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("eps", [1e-3, 1e-2])
def test_local_identifiability(truth, frames, eps):
    base = reprojection_loss(truth, frames)
    for k, u in enumerate(truth.units):
        for name in ("fov", "fov_offset", "z_offset"):
            for sgn in (1, -1):
                vals = dict(fov=u.fov, fov_offset=u.fov_offset, z_offset=u.z_offset)
                vals[name] += sgn * eps
                units = list(truth.units)
                units[k] = UnitIntrinsics(vals["fov"], vals["fov_offset"], vals["z_offset"],
                                          u.row_start, u.row_end)
                assert reprojection_loss(truth.replace(units=units), frames) > base
    for r in (0, 20, 45, 63):
        for sgn in (1, -1):
            d = truth.diode_offsets.copy()
            d[r] += sgn * eps
            assert reprojection_loss(truth.replace(diode_offsets=d), frames) > base


# --- gauge -----------------------------------------------------------------

def test_gauge_equivalence(truth, frames):
    d = truth.diode_offsets.copy()
    x = (np.arange(32) + 0.5) / 32
    d[:32] += 1e-3 + 2e-3 * x
    shifted = truth.replace(diode_offsets=d)
    canon = absorb_gauge(shifted)
    assert np.allclose(canon.diode_offsets, truth.diode_offsets, atol=1e-15)
    # same row elevations, hence the same loss
    assert np.allclose(canon.row_elevations(), shifted.row_elevations(), atol=1e-15)
    P = gauge_basis(truth)
    assert np.allclose(P @ P, P) and np.allclose(P @ truth.diode_offsets, truth.diode_offsets)


# --- optimization ----------------------------------------------------------

def test_frozen_returns_initial(truth, frames):
    init = _perturbed(truth)
    rep = calibrate(CalibProblem(frames, init, FreeMask.none(init)))
    assert rep.final == init and rep.evaluations == 1 and len(rep.loss_history) == 1


def test_problem_validation(truth, frames):
    with pytest.raises(ValueError):
        CalibProblem([], truth)
    with pytest.raises(ValueError):
        CalibProblem(frames, truth, loss_weights=(0, 0, 0, 0))
    with pytest.raises(ValueError):
        CalibProblem(frames, truth, loss_weights=(1, -1, 0, 0))


def test_recovers_intrinsics(truth, frames):
    init = _perturbed(truth)
    rep = calibrate(CalibProblem(frames, init), OptimizerConfig(lr=1e-3, iterations=100, lr_final_factor=0.1))
    best = np.minimum.accumulate(rep.loss_history)
    assert np.all(np.diff(best) <= 0)
    assert min(rep.loss_history) <= rep.initial_loss
    for a, b in zip(rep.final.units, truth.units):
        assert abs(a.fov - b.fov) < 1e-4 and abs(a.fov_offset - b.fov_offset) < 1e-4
        assert abs(a.z_offset - b.z_offset) < 1e-3
    assert np.abs(rep.final.diode_offsets - truth.diode_offsets).max() < 2e-4


def test_two_units_beat_single_unit(truth, frames):
    single = init_from_rings(frames, W, 64)
    opt = OptimizerConfig(lr=1e-3, iterations=50, lr_final_factor=0.1)
    base = calibrate(CalibProblem(frames, single), opt)
    init = hdl64_like(W)
    two = calibrate(CalibProblem(frames, init), opt)
    assert two.per_channel_residuals["i"] < base.per_channel_residuals["i"]
    assert two.per_channel_residuals["j"] <= base.per_channel_residuals["j"] + 1e-12


def test_divergence_reports_state(truth, frames):
    init = _perturbed(truth)
    with pytest.raises(CalibrationDiverged) as err:
        calibrate(CalibProblem(frames, init), OptimizerConfig(lr=10.0, iterations=20), refine_iterations=0)
    assert isinstance(err.value.state, SensorIntrinsics)
