import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spicalib import io


def test_pfm_header_and_row_order(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    io.write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], "<f4")
    # bottom row first
    assert body.tolist() == [3, 4, 5, 0, 1, 2]
    assert np.array_equal(io.read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_colour_and_big_endian(tmp_path):
    img = np.random.default_rng(0).random((4, 5, 3)).astype(np.float32)
    io.write_pfm(tmp_path / "c.pfm", img)
    assert (tmp_path / "c.pfm").read_bytes().startswith(b"PF\n5 4\n-1.0\n")
    assert np.array_equal(io.read_pfm(tmp_path / "c.pfm"), img)
    be = tmp_path / "be.pfm"
    be.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([1.5, -2.0], ">f4").tobytes())
    assert io.read_pfm(be).tolist() == [[1.5, -2.0]]


def test_pfm_rejects_bad_input(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(io.FormatError):
        io.read_pfm(tmp_path / "x.pfm")
    (tmp_path / "t.pfm").write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(io.FormatError):
        io.read_pfm(tmp_path / "t.pfm")
    with pytest.raises(io.FormatError):
        io.write_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_lossless(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pfm") / "r.pfm"
    io.write_pfm(path, img)
    assert np.array_equal(io.read_pfm(path), img)


def test_pgm_mask_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((7, 9)) > 0.5
    io.write_pgm_mask(tmp_path / "m.pgm", mask)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 7\n255\n")
    assert set(np.unique(np.frombuffer(raw[11:], np.uint8))) <= {0, 255}
    assert np.array_equal(io.read_pgm_mask(tmp_path / "m.pgm"), mask)


def test_ply_round_trip(tmp_path):
    pts = np.random.default_rng(2).normal(size=(50, 3)) * 100
    io.write_ply(tmp_path / "c.ply", pts)
    text = (tmp_path / "c.ply").read_text()
    assert "element vertex 50" in text and "property float z" in text
    assert np.allclose(io.read_ply(tmp_path / "c.ply"), pts, rtol=1e-8)
    io.write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert io.read_ply(tmp_path / "e.ply").shape == (0, 3)


def test_json_round_trip(tmp_path):
    obj = {"b": [1.5, 2.0], "a": {"x": 1}}
    io.write_json(tmp_path / "o.json", obj)
    assert io.read_json(tmp_path / "o.json") == obj
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(io.FormatError):
        io.read_json(tmp_path / "bad.json")
