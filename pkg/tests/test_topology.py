from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from topowarp.geometry import euler_to_rotation, euler_to_transform, is_rotation
from topowarp.synthetic import generate_scene
from topowarp.topology import (CONTACT, SEPARATION, TopologyConfig, TopologyEvent, blend,
                               cluster_events, compress_map, extract_events, stretch,
                               topology_aware_register)
from topowarp.warp import DenseWarp


def _random_warp(rng, n, rot=0.3, trans=0.05):
    return DenseWarp(euler_to_rotation(rng.uniform(-rot, rot, (n, 3))),
                     rng.uniform(-trans, trans, (n, 3)))


class TestStretch:
    def test_identity_is_one(self, rng):
        c = random_cloud(rng, 300)
        np.testing.assert_array_equal(stretch(c, DenseWarp.identity(300), 0.03), 1.0)

    def test_rigid_is_one(self, rng):
        c = random_cloud(rng, 300)
        W = DenseWarp.from_transform(euler_to_transform([0.4, -0.2, 1.0, 0.1, 0.2, -0.3]), 300)
        assert np.abs(stretch(c, W, 0.03) - 1.0).max() < 1e-12

    def test_uniform_scaling_line(self):
        x = np.column_stack([np.arange(50) * 0.01, np.zeros(50), np.zeros(50)])
        # translation t_i = x_i doubles every point
        W = DenseWarp(np.broadcast_to(np.eye(3), (50, 3, 3)), x)
        np.testing.assert_allclose(stretch(x, W, 0.025), 2.0, rtol=1e-12)

    def test_isolated_points_default_to_one(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 0.001, 0]])
        W = DenseWarp(np.broadcast_to(np.eye(3), (3, 3, 3)), [[0, 0, 0], [0, 0, 0], [0, 0.002, 0]])
        s = stretch(pts, W, 0.01)
        assert s[0] == 1.0
        assert s[1] == pytest.approx(3.0) and s[2] == pytest.approx(3.0)

    def test_coincident_points_ignored(self):
        pts = np.zeros((4, 3))
        W = DenseWarp(np.broadcast_to(np.eye(3), (4, 3, 3)), np.eye(4, 3))
        np.testing.assert_array_equal(stretch(pts, W, 0.01), 1.0)

    def test_radius_validation(self, rng):
        with pytest.raises(ValueError):
            stretch(random_cloud(rng, 5), DenseWarp.identity(5), 0.0)


class TestCompress:
    def test_identity_pulls_back_own_field(self, rng):
        c = random_cloud(rng, 100)
        field = rng.uniform(0, 5, 100)
        np.testing.assert_array_equal(compress_map(c, c, DenseWarp.identity(100), field), field)

    def test_single_target_point(self, rng):
        c = random_cloud(rng, 30)
        t = random_cloud(rng, 1)
        np.testing.assert_array_equal(compress_map(c, t, DenseWarp.identity(30), [7.0]), 7.0)

    def test_size_mismatch(self, rng):
        c = random_cloud(rng, 10)
        with pytest.raises(ValueError, match="stretch field"):
            compress_map(c, c, DenseWarp.identity(10), np.ones(3))


class TestExtract:
    @pytest.mark.parametrize("sf,sb,cf,cb,want", [
        (3.0, 1.0, 1.0, 1.0, (False, True)),
        (1.0, 3.0, 1.0, 1.0, (False, True)),
        (1.0, 1.0, 3.0, 1.0, (True, False)),
        (3.0, 1.0, 2.5, 1.0, (False, False)),
        (2.2, 1.0, 1.0, 1.0, (False, False)),
        (1.0, 1.0, 1.0, 1.0, (False, False)),
    ])
    def test_rule(self, sf, sb, cf, cb, want):
        con, sep = extract_events([sf], [sb], [cf], [cb])
        assert (bool(con[0]), bool(sep[0])) == want

    def test_validation(self):
        with pytest.raises(ValueError):
            extract_events([1.0], [1.0], [1.0], [1.0], tau=0.0)
        with pytest.raises(ValueError):
            extract_events([1.0], [1.0], [1.0], [1.0], alpha=0.5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau=st.floats(0.1, 5.0), alpha=st.floats(1.0, 3.0))
def test_exclusive_masks(seed, tau, alpha):
    rng = np.random.default_rng(seed)
    f = [rng.uniform(0.5, 6.0, 200) for _ in range(4)]
    # ties between stretch and compress must not produce double labels
    f[2][:20] = f[0][:20]
    con, sep = extract_events(*f, tau=tau, alpha=alpha)
    assert not np.any(con & sep)


def _union_find_labels(pts, d):
    n = len(pts)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(n):
        for b in range(a + 1, n):
            if np.linalg.norm(pts[a] - pts[b]) <= d:
                parent[find(a)] = find(b)
    return [find(a) for a in range(n)]


class TestCluster:
    def test_two_blobs(self, rng):
        a = rng.normal(scale=0.004, size=(100, 3))
        b = rng.normal(scale=0.004, size=(120, 3)) + [0.5, 0, 0]
        pts = np.concatenate([a, b])
        evs = cluster_events(pts, np.zeros(220, bool), np.ones(220, bool), timestamp=3)
        assert [len(e) for e in evs] == [100, 120]
        assert all(e.label == SEPARATION and e.timestamp == 3 for e in evs)
        np.testing.assert_array_equal(evs[0].indices, np.arange(100))

    def test_small_components_dropped(self, rng):
        pts = rng.normal(scale=0.004, size=(50, 3))
        assert cluster_events(pts, np.ones(50, bool), np.zeros(50, bool)) == []
        assert len(cluster_events(pts, np.ones(50, bool), np.zeros(50, bool), min_points=50)) == 1

    def test_contacts_first(self, rng):
        pts = rng.normal(scale=0.004, size=(200, 3))
        pts[100:] += 1.0
        con = np.arange(200) >= 100
        evs = cluster_events(pts, con, ~con, min_points=10)
        assert [e.label for e in evs] == [CONTACT, SEPARATION]

    def test_matches_union_find(self, rng):
        pts = rng.uniform(0, 0.1, (150, 3))
        evs = cluster_events(pts, np.zeros(150, bool), np.ones(150, bool), cluster_dist=0.012,
                             min_points=1)
        roots = _union_find_labels(pts, 0.012)
        want = {}
        for i, r in enumerate(roots):
            want.setdefault(r, []).append(i)
        got = sorted(tuple(e.indices.tolist()) for e in evs)
        assert got == sorted(tuple(v) for v in want.values())

    def test_event_label_validation(self):
        with pytest.raises(ValueError, match="label"):
            TopologyEvent("tear", 0, np.zeros((1, 3)))


class TestBlend:
    def test_no_events_returns_forward(self, rng):
        c = random_cloud(rng, 80)
        F, B = _random_warp(rng, 80), _random_warp(rng, 80)
        W, w = blend(c, F, B, np.zeros((0, 3)), np.zeros((0, 3)))
        assert W.equals(F, atol=0.0)
        assert np.all(w.w_f == 1.0) and np.all(w.w_b == 0.0)

    def test_coincident_separation_point(self, rng):
        c = random_cloud(rng, 10)
        far = c.points[:1] + 10.0
        F, B = _random_warp(rng, 10), _random_warp(rng, 10)
        _, w = blend(c, F, B, far, c.points[:1])
        assert w.w_b[0] == 0.5 and w.w_f[0] == 0.5

    def test_equal_warps_unchanged(self, rng):
        c = random_cloud(rng, 60)
        F = _random_warp(rng, 60)
        W, _ = blend(c, F, F, np.zeros((0, 3)), c.points[::3])
        assert W.equals(F, atol=1e-12)

    def test_translation_only_is_convex(self, rng):
        c = random_cloud(rng, 40)
        I = np.broadcast_to(np.eye(3), (40, 3, 3))
        F = DenseWarp(I, np.zeros((40, 3)))
        B = DenseWarp(I, np.ones((40, 3)))
        W, w = blend(c, F, B, np.zeros((0, 3)), c.points)
        np.testing.assert_allclose(W.translations, np.repeat(w.w_b[:, None], 3, 1), atol=1e-15)

    def test_validation(self, rng):
        c = random_cloud(rng, 5)
        with pytest.raises(ValueError, match="support size"):
            blend(c, DenseWarp.identity(4), DenseWarp.identity(5), np.zeros((0, 3)),
                  np.zeros((0, 3)))
        with pytest.raises(ValueError):
            blend(c, DenseWarp.identity(5), DenseWarp.identity(5), np.zeros((0, 3)),
                  np.zeros((0, 3)), rho_e=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rho_e=st.floats(0.01, 0.2))
def test_blend_weights_property(seed, rho_e):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, 120)
    con = rng.uniform(-0.1, 0.1, (int(rng.integers(0, 20)), 3))
    sep = rng.uniform(-0.1, 0.1, (int(rng.integers(0, 20)), 3))
    W, w = blend(c, _random_warp(rng, 120), _random_warp(rng, 120), con, sep, rho_e)
    assert np.all((w.w_f + w.w_b) == 1.0)
    assert np.all((w.w_b >= 0) & (w.w_b < 1))
    assert is_rotation(W.rotations)
    if len(sep):
        d = np.min(np.linalg.norm(c.points[:, None] - sep[None], axis=2), axis=1)
        assert np.all(w.w_f[d > rho_e] == 1.0)


def test_rigid_scene_has_no_events():
    scene = generate_scene("rigid", seed=2)
    res = topology_aware_register(scene.source, scene.target)
    assert res.events == []
    assert not res.con_mask.any() and not res.sep_mask.any()
    assert res.warp.equals(res.forward_warp, atol=0.0)


def test_disabled_returns_forward():
    scene = generate_scene("separation", seed=0)
    res = topology_aware_register(scene.source, scene.target,
                                  topo_cfg=TopologyConfig(enabled=False))
    assert res.events == [] and res.backward is None
    assert res.warp is res.forward_warp


def test_config_validation():
    with pytest.raises(ValueError):
        TopologyConfig(rho_s=0)
    with pytest.raises(ValueError):
        TopologyConfig(alpha=0.9)
    with pytest.raises(ValueError):
        TopologyConfig(min_event_points=0)
