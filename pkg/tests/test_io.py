from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from topowarp.camera import DepthFrame, Intrinsics
from topowarp.geometry import OrientedPointCloud
from topowarp.io import (PlyHeaderError, PlyMissingPropertyError, PlyTruncatedError,
                         append_metrics, load_depth, load_events, load_flow, load_ply,
                         metrics_line, save_depth, save_events, save_flow, save_ply)
from topowarp.topology import CONTACT, SEPARATION, TopologyEvent


def _quantized(c):
    return np.floor(c * 255 + 0.5) / 255


def _assert_same(a: OrientedPointCloud, b: OrientedPointCloud):
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.normals, b.normals)
    np.testing.assert_array_equal(_quantized(a.colors), b.colors)
    np.testing.assert_array_equal(a.valid, b.valid)
    if a.keypoints is None:
        assert b.keypoints is None
    else:
        np.testing.assert_array_equal(a.keypoints.indices, b.keypoints.indices)
        np.testing.assert_array_equal(a.keypoints.descriptors, b.keypoints.descriptors)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), binary=st.booleans(),
       kp=st.booleans())
def test_ply_round_trip(tmp_path_factory, seed, n, binary, kp):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, n, keypoints=min(n, 3) if kp else 0)
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    save_ply(path, c, binary=binary)
    _assert_same(c, load_ply(path))


def test_zero_normals_load_invalid(tmp_path, rng):
    c = random_cloud(rng, 10)
    nrm = c.normals.copy()
    nrm[2] = 0
    save_ply(tmp_path / "a.ply", OrientedPointCloud(c.points, nrm, c.colors))
    back = load_ply(tmp_path / "a.ply")
    assert not back.valid[2] and back.valid.sum() == 9


def test_missing_normal_property(tmp_path):
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                                    "property float x\nproperty float y\nproperty float z\n"
                                    "end_header\n0 0 0\n")
    with pytest.raises(PlyMissingPropertyError, match="nx"):
        load_ply(tmp_path / "a.ply")


def test_float_ply_without_colors(tmp_path):
    (tmp_path / "a.ply").write_text(
        "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\n"
        + "".join(f"property float {p}\n" for p in ("x", "y", "z", "nx", "ny", "nz"))
        + "end_header\n0 0 1 0 0 -1\n1 0 1 0 0 -1\n")
    c = load_ply(tmp_path / "a.ply")
    assert len(c) == 2 and c.valid.all()
    np.testing.assert_array_equal(c.points[1], [1, 0, 1])


def test_truncated_binary(tmp_path, rng):
    save_ply(tmp_path / "a.ply", random_cloud(rng, 20))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "b.ply").write_bytes(data[:-10])
    with pytest.raises(PlyTruncatedError):
        load_ply(tmp_path / "b.ply")


def test_truncated_ascii(tmp_path, rng):
    save_ply(tmp_path / "a.ply", random_cloud(rng, 5), binary=False)
    lines = (tmp_path / "a.ply").read_text().splitlines()
    (tmp_path / "b.ply").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(PlyTruncatedError):
        load_ply(tmp_path / "b.ply")


@pytest.mark.parametrize("text", [
    "not a ply file",
    "ply\nformat ascii 1.0\nelement vertex 1\n",
    "ply\nformat weird 1.0\nend_header\n",
    "ply\nproperty float x\nend_header\n",
    "ply\nformat ascii 1.0\nelement vertex x\nend_header\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n",
    "ply\nelement vertex 0\nend_header\n",
    "ply\nformat ascii 1.0\nbogus line\nend_header\n",
])
def test_malformed_header(tmp_path, text):
    (tmp_path / "a.ply").write_text(text)
    with pytest.raises(PlyHeaderError, match="malformed header"):
        load_ply(tmp_path / "a.ply")


def test_big_endian(tmp_path):
    body = np.array([[0.5, 0, 1, 0, 0, -1]], dtype=">f8").tobytes()
    head = ("ply\nformat binary_big_endian 1.0\nelement vertex 1\n"
            + "".join(f"property double {p}\n" for p in ("x", "y", "z", "nx", "ny", "nz"))
            + "end_header\n").encode()
    (tmp_path / "a.ply").write_bytes(head + body)
    np.testing.assert_array_equal(load_ply(tmp_path / "a.ply").points, [[0.5, 0, 1]])


class TestDepth:
    def test_round_trip(self, tmp_path, rng):
        d = np.round(rng.uniform(0.3, 3.0, (12, 16)), 3)
        d[0, 0] = 0.0
        K = Intrinsics(500.0, 510.5, 7.5, 5.5)
        save_depth(tmp_path / "d.png", DepthFrame(d, K))
        back = load_depth(tmp_path / "d.png")
        np.testing.assert_allclose(back.depth, d, atol=5e-4)
        assert back.intrinsics == K and not back.valid[0, 0]

    def test_cutoff(self, tmp_path):
        K = Intrinsics(100.0, 100.0, 1.5, 1.5)
        save_depth(tmp_path / "d.png", DepthFrame(np.full((4, 4), 6.0), K, depth_cutoff=10.0))
        assert not load_depth(tmp_path / "d.png").valid.any()
        assert load_depth(tmp_path / "d.png", depth_cutoff=7.0).valid.all()

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_depth(tmp_path / "none.png")
        K = Intrinsics(100.0, 100.0, 1.5, 1.5)
        save_depth(tmp_path / "d.png", DepthFrame(np.ones((4, 4)), K))
        (tmp_path / "d.txt").unlink()
        with pytest.raises(FileNotFoundError, match="sidecar"):
            load_depth(tmp_path / "d.png")

    def test_range(self, tmp_path):
        K = Intrinsics(100.0, 100.0, 1.5, 1.5)
        with pytest.raises(ValueError, match="16-bit"):
            save_depth(tmp_path / "d.png", DepthFrame(np.full((2, 2), 4.0), K), depth_scale=1e5)


class TestFlow:
    def test_round_trip(self, tmp_path, rng):
        f = rng.normal(size=(5, 7, 2)).astype(np.float32).astype(np.float64)
        valid = rng.uniform(size=(5, 7)) > 0.3
        save_flow(tmp_path / "a.flo", f, valid)
        back, v = load_flow(tmp_path / "a.flo")
        np.testing.assert_array_equal(v, valid)
        np.testing.assert_array_equal(back[valid], f[valid])

    def test_header(self, tmp_path):
        save_flow(tmp_path / "a.flo", np.zeros((2, 3, 2)), np.ones((2, 3), bool))
        data = (tmp_path / "a.flo").read_bytes()
        assert data[:4] == b"PIEH" and len(data) == 12 + 2 * 3 * 8
        (tmp_path / "b.flo").write_bytes(data[:-4])
        with pytest.raises(ValueError, match="truncated"):
            load_flow(tmp_path / "b.flo")
        (tmp_path / "c.flo").write_bytes(b"XXXX" + data[4:])
        with pytest.raises(ValueError, match="not a .flo"):
            load_flow(tmp_path / "c.flo")


class TestEvents:
    def test_round_trip(self, tmp_path, rng):
        evs = [TopologyEvent(CONTACT, 3, rng.normal(size=(4, 3)), [0, 1, 2, 3]),
               TopologyEvent(SEPARATION, 4, rng.normal(size=(2, 3)))]
        save_events(tmp_path / "e.jsonl", evs)
        back = load_events(tmp_path / "e.jsonl")
        assert [(e.label, e.timestamp) for e in back] == [(CONTACT, 3), (SEPARATION, 4)]
        np.testing.assert_array_equal(back[0].points, evs[0].points)
        np.testing.assert_array_equal(back[0].indices, [0, 1, 2, 3])
        assert back[1].indices is None

    def test_bad_record(self, tmp_path):
        (tmp_path / "e.jsonl").write_text('{"label": "contact", "timestamp": 0, "points": []}\n'
                                          '{"label": "tear", "timestamp": 0, "points": []}\n')
        with pytest.raises(ValueError, match=":2:"):
            load_events(tmp_path / "e.jsonl")


def test_metrics_lines(tmp_path):
    rec = {"a": np.float64(1.5), "b": float("nan"), "c": [np.int64(2), float("inf")]}
    assert metrics_line(rec) == '{"a": 1.5, "b": null, "c": [2, null]}'
    append_metrics(tmp_path / "m.jsonl", rec)
    append_metrics(tmp_path / "m.jsonl", {"x": 1})
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 2
