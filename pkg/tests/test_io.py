import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lcfusion.correspond import PointCloud
from lcfusion.errors import FormatError
from lcfusion.io import read_depth_map, read_ply, write_depth_map, write_ply
from lcfusion.mapping import DepthMap


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    curv = rng.uniform(size=50)
    write_ply(tmp_path / "c.ply", pts, nrm, curv, binary=binary)
    p, n, c = read_ply(tmp_path / "c.ply")
    assert np.array_equal(p, pts) and np.array_equal(n, nrm) and np.array_equal(c, curv)


def test_ply_points_only(tmp_path):
    PointCloud(np.eye(3)).save(tmp_path / "c.ply")
    c = PointCloud.load(tmp_path / "c.ply")
    assert np.array_equal(c.points, np.eye(3)) and c.normals is None and c.curvatures is None


def test_ply_float_properties_and_extra_element(tmp_path):
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
              "property float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\n"
              "end_header\n")
    rec = np.zeros(2, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
    rec["x"] = [1, 2]
    rec["z"] = [3, 4]
    (tmp_path / "f.ply").write_bytes(header.encode() + rec.tobytes())
    p, n, c = read_ply(tmp_path / "f.ply")
    assert np.array_equal(p, [[1, 0, 3], [2, 0, 4]]) and n is None


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "x.ply")


@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-10, 10, width=32) | st.just(np.nan)))
def test_depth_map_round_trip(tmp_path_factory, depth):
    path = tmp_path_factory.mktemp("d") / "d.dmap"
    write_depth_map(path, depth)
    back = read_depth_map(path)
    assert back.shape == depth.shape
    assert np.array_equal(np.isnan(back), np.isnan(depth))
    assert np.array_equal(back[~np.isnan(back)], depth[~np.isnan(depth)])


def test_depth_map_layout(tmp_path):
    d = np.array([[1.0, 2.0, 3.0], [4.0, np.nan, 6.0]])
    write_depth_map(tmp_path / "d.dmap", d)
    raw = (tmp_path / "d.dmap").read_bytes()
    assert raw[:4] == b"DMAP"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [3, 2]
    assert np.frombuffer(raw[12:], "<f4")[:3].tolist() == [1, 2, 3]
    dm = DepthMap.load(tmp_path / "d.dmap")
    assert dm.width == 3 and dm.height == 2 and dm.valid.sum() == 5


def test_depth_map_truncated(tmp_path):
    (tmp_path / "d.dmap").write_bytes(b"DMAP" + np.array([4, 4], "<u4").tobytes() + b"\0" * 8)
    with pytest.raises(FormatError):
        read_depth_map(tmp_path / "d.dmap")
