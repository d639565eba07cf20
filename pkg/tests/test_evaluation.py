from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topowarp.camera import DepthFrame, Intrinsics, render_depth
from topowarp.evaluation import (Flow2D, ae, epe, flow_report, frame_flow, match_events,
                                 overlap_rho, separation_registration_error, visible_mask,
                                 within_count)
from topowarp.geometry import RigidTransform
from topowarp.synthetic import DEFAULT_CAMERA
from topowarp.topology import CONTACT, SEPARATION, TopologyEvent
from topowarp.warp import DenseWarp

K = Intrinsics(100.0, 120.0, 15.5, 11.5)


def _plane_frame(z=0.8, h=24, w=32):
    return DepthFrame(np.full((h, w), z), K)


def _translation(n, t):
    return DenseWarp.from_transform(RigidTransform(np.eye(3), t), n)


class TestFlow:
    def test_identity_is_zero(self):
        f = _plane_frame()
        flow = frame_flow(f, DenseWarp.identity(int(f.valid.sum())))
        assert flow.valid.all()
        assert np.abs(flow.flow).max() < 1e-12

    def test_lateral_translation(self):
        f = _plane_frame(z=0.8)
        t = np.array([0.004, -0.002, 0.0])
        flow = frame_flow(f, _translation(int(f.valid.sum()), t))
        np.testing.assert_allclose(flow.flow[..., 0], K.fx * t[0] / 0.8, atol=1e-10)
        np.testing.assert_allclose(flow.flow[..., 1], K.fy * t[1] / 0.8, atol=1e-10)

    def test_behind_camera_invalid(self):
        f = _plane_frame(z=0.5)
        flow = frame_flow(f, _translation(int(f.valid.sum()), [0, 0, -0.6]))
        assert not flow.valid.any()

    def test_invalid_pixels_stay_invalid(self):
        d = np.full((24, 32), 0.8)
        d[3, 4] = 0.0
        f = DepthFrame(d, K)
        flow = frame_flow(f, DenseWarp.identity(int(f.valid.sum())))
        assert not flow.valid[3, 4] and flow.valid.sum() == 24 * 32 - 1

    def test_missing_intrinsics(self):
        f = DepthFrame(np.ones((2, 2)), None)
        with pytest.raises(ValueError):
            frame_flow(f, DenseWarp.identity(4))


def _flow(values, valid=None):
    v = np.asarray(values, dtype=float).reshape(1, -1, 2)
    return Flow2D(v, np.ones(v.shape[:2], bool) if valid is None else np.asarray(valid)[None])


class TestErrors:
    def test_epe_345(self):
        per, mean = epe(_flow([[3.0, 4.0], [0.0, 0.0]]), _flow([[0.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(per, [[5.0, 0.0]])
        assert mean == 2.5

    def test_ae_45_degrees(self):
        _, mean = ae(_flow([[1.0, 0.0]]), _flow([[0.0, 0.0]]))
        assert mean == pytest.approx(45.0, abs=1e-12)

    def test_ae_identical_is_zero(self):
        # the cosine may round above 1 and must be clamped
        f = _flow([[1e8, -3e7], [0.3, 0.1]])
        _, mean = ae(f, f)
        assert mean == pytest.approx(0.0, abs=1e-5)

    def test_joint_validity(self):
        est = _flow([[1.0, 0.0], [9.0, 9.0]], [True, False])
        per, mean = epe(est, _flow([[0.0, 0.0], [0.0, 0.0]]))
        assert np.isnan(per[0, 1]) and mean == 1.0
        with pytest.raises(ValueError, match="jointly valid"):
            epe(_flow([[0, 0]], [False]), _flow([[0, 0]]))

    def test_report(self):
        rep = flow_report(_flow([[3.0, 4.0], [0.0, 0.0]]), _flow([[0.0, 0.0], [0.0, 0.0]]))
        assert rep["epe_mean"] == 2.5 and rep["valid_pixels"] == 2

    def test_nonfinite_flow_is_invalid(self):
        f = _flow([[np.nan, 0.0], [1.0, 1.0]])
        assert f.valid.tolist() == [[False, True]]

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            Flow2D(np.zeros((2, 2)), np.ones((2, 2), bool))
        with pytest.raises(ValueError, match="differ in size"):
            epe(_flow([[0, 0]]), _flow([[0, 0], [0, 0]]))


class TestOverlap:
    def test_frozen_value(self):
        A = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        B = np.array([[0.01, 0, 0]])
        assert within_count(A, B, 0.03) == 1
        assert overlap_rho(A, B, 0.03) == pytest.approx(2 / 3)

    def test_identical_is_one(self, rng):
        A = rng.normal(size=(30, 3))
        assert overlap_rho(A, A) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            overlap_rho(np.zeros((0, 3)), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            overlap_rho(np.zeros((1, 3)), np.zeros((1, 3)), rho=0.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rho=st.floats(0.005, 0.2), extra=st.floats(0.0, 0.2))
def test_overlap_symmetric_monotone_bounded(seed, rho, extra):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-0.2, 0.2, (int(rng.integers(1, 40)), 3))
    B = rng.uniform(-0.2, 0.2, (int(rng.integers(1, 40)), 3))
    o = overlap_rho(A, B, rho)
    assert o == overlap_rho(B, A, rho)
    assert 0.0 <= o <= 1.0
    assert overlap_rho(A, B, rho + extra) >= o


def _ev(label, t, pts):
    return TopologyEvent(label, t, np.asarray(pts, dtype=float))


class TestMatchEvents:
    pts = np.column_stack([np.linspace(0, 0.1, 20), np.zeros(20), np.zeros(20)])

    def test_exact_match_with_delay(self):
        rep = match_events([_ev(SEPARATION, 5, self.pts)], [_ev(SEPARATION, 4, self.pts)])
        assert rep.matched_fraction_gt == 100.0 and rep.matched_fraction_det == 100.0
        assert rep.mean_overlap == 1.0 and rep.mean_delay == 1.0
        assert rep.gt_to_det == [0] and rep.det_to_gt == [0]

    def test_label_and_time_gates(self):
        gt = [_ev(SEPARATION, 5, self.pts)]
        assert match_events(gt, [_ev(CONTACT, 5, self.pts)]).gt_to_det == [-1]
        assert match_events(gt, [_ev(SEPARATION, 8, self.pts)]).gt_to_det == [-1]
        assert match_events(gt, [_ev(SEPARATION, 7, self.pts)]).gt_to_det == [0]

    def test_min_overlap(self):
        rep = match_events([_ev(CONTACT, 0, self.pts)], [_ev(CONTACT, 0, self.pts + 1.0)])
        assert rep.matched_fraction_gt == 0.0
        assert rep.mean_overlap == 0.0 and rep.mean_delay == 0.0

    def test_tie_goes_to_lower_index(self):
        det = [_ev(CONTACT, 0, self.pts), _ev(CONTACT, 0, self.pts)]
        rep = match_events([_ev(CONTACT, 0, self.pts)], det)
        assert rep.gt_to_det == [0] and rep.det_to_gt == [0, 0]
        assert rep.matched_fraction_det == 100.0

    def test_best_overlap_wins(self):
        half = self.pts[:10]
        det = [_ev(CONTACT, 0, half), _ev(CONTACT, 0, self.pts)]
        rep = match_events([_ev(CONTACT, 0, self.pts)], det)
        assert rep.gt_to_det == [1]
        assert len(rep.matches) == 2

    def test_empty(self):
        rep = match_events([], [])
        assert rep.matched_fraction_gt == 0.0 and rep.as_dict()["matches"] == []


def _plane(z=0.7, spacing=0.002):
    g = np.arange(-0.05, 0.05, spacing)
    x, y = np.meshgrid(g, g)
    return np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])


def _depth_of(points):
    w, h = 320, 240
    return DepthFrame(render_depth(points, DEFAULT_CAMERA, w, h, splat=2), DEFAULT_CAMERA,
                      depth_cutoff=10.0)


class TestSeparationError:
    def test_exact_warp(self):
        src = _plane()
        tgt = src + [0, 0, 0.005]
        err = separation_registration_error(src, tgt, _depth_of(tgt),
                                            _translation(len(src), [0, 0, 0.005]),
                                            np.ones(len(src), bool))
        assert err < 1.0

    def test_normal_offset_in_mm(self):
        src = _plane()
        tgt = src + [0, 0, 0.005]
        err = separation_registration_error(src, tgt, _depth_of(tgt), DenseWarp.identity(len(src)),
                                            np.arange(len(src)))
        assert err == pytest.approx(5.0, abs=1e-9)

    def test_all_occluded(self):
        src = _plane(z=0.73)
        tgt = _plane(z=0.7)
        with pytest.raises(ValueError, match="no visible points"):
            separation_registration_error(src, tgt, _depth_of(tgt), DenseWarp.identity(len(src)),
                                          np.ones(len(src), bool))

    def test_empty_mask(self):
        src = _plane()
        with pytest.raises(ValueError, match="empty mask"):
            separation_registration_error(src, src, _depth_of(src), DenseWarp.identity(len(src)),
                                          np.zeros(len(src), bool))


def test_visible_mask_rules():
    frame = _depth_of(_plane(z=0.7))
    pts = np.array([[0.0, 0.0, 0.705],   # within dz_occ
                    [0.0, 0.0, 0.75],    # behind the surface
                    [5.0, 0.0, 0.75],    # off image
                    [0.0, 0.3, 0.75]])   # on image but no depth there
    assert visible_mask(pts, frame, 0.01).tolist() == [True, False, True, True]
