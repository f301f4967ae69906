import json
import os
import struct

import numpy as np
import pytest

from healswin import io
from healswin import windows as W
from healswin.maps import HealpixMap, ImageRaster


def test_map_layout_bytes(tmp_path):
    data = np.arange(8 * 2, dtype=np.float32).reshape(8, 2)
    valid = np.array([1, 0, 1, 1, 0, 0, 0, 1], dtype=bool)
    m = HealpixMap(1, data, valid, 8, ["a", "b"])
    path = tmp_path / "m.hswm"
    io.save_map(path, m)
    raw = path.read_bytes()
    assert raw[:8] == b"HSWM1\0\0\0"
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    assert header["nside"] == 1 and header["num_faces"] == 8 and header["scheme"] == "nested"
    assert header["channels"] == ["a", "b"] and header["dtype"] == "f32le" and header["validity"] is True
    # one bitmap byte, least significant bit first
    assert raw[12 + hlen] == 0b10001101
    payload = np.frombuffer(raw[13 + hlen :], dtype="<f4")
    # nested order, channel-minor
    assert np.array_equal(payload, data.ravel())


def test_map_roundtrip(tmp_path, rng):
    m = HealpixMap(4, rng.random((128, 3)).astype(np.float32), rng.random(128) > 0.5, 8, ["r", "g", "b"])
    io.save_map(tmp_path / "m", m)
    back = io.load(tmp_path / "m")
    assert isinstance(back, HealpixMap)
    assert np.array_equal(back.data, m.data) and np.array_equal(back.validity, m.validity)
    assert back.channel_names == ["r", "g", "b"]


def test_raster_roundtrip(tmp_path, rng):
    r = ImageRaster(rng.random((5, 7, 2)), rng.random((5, 7)) > 0.3, ["x", "y"])
    io.save_raster(tmp_path / "r", r)
    back = io.load(tmp_path / "r")
    assert isinstance(back, ImageRaster)
    assert np.array_equal(back.data, r.data) and np.array_equal(back.validity, r.validity)
    assert io.load_header(tmp_path / "r")["scheme"] == "raster"


def test_plan_and_mask_roundtrip(tmp_path):
    grid = W.build_patches(8, 4)
    plan = W.spiral_shift_plan(grid, 3)
    io.save_plan(tmp_path / "p", plan)
    back = io.load_plan(tmp_path / "p")
    for name in ("forward", "inverse", "origin_group"):
        assert np.array_equal(getattr(back, name), getattr(plan, name))
    assert (back.strategy, back.shift, back.nside) == ("spiral", 3, grid.nside)
    assert io.load_header(tmp_path / "p")["dtype"] == "i64le"
    mask = W.attention_mask(plan, W.partition_windows(grid, 16))
    io.save_mask(tmp_path / "k", mask)
    assert np.array_equal(io.load_mask(tmp_path / "k"), mask)
    with pytest.raises(io.FormatError):
        io.load_mask(tmp_path / "p")


def test_checkpoint_roundtrip(tmp_path, rng):
    state = {"b.w": rng.random((3, 4)).astype(np.float32), "a": rng.random(5).astype(np.float32)}
    io.save_checkpoint(tmp_path / "c", state, {"nside": 4})
    back, cfg, header = io.load_checkpoint(tmp_path / "c")
    assert cfg == {"nside": 4}
    assert [t["name"] for t in header["tensors"]] == ["a", "b.w"]
    for k in state:
        assert np.array_equal(back[k], state[k])


def test_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTAFILE" + b"\0" * 20)
    with pytest.raises(io.FormatError):
        io.load(p)
    p.write_bytes(io.MAGIC + struct.pack("<I", 5) + b"{oops")
    with pytest.raises(io.FormatError):
        io.load(p)


def test_truncated_payload(tmp_path):
    m = HealpixMap(1, np.ones((8, 1)))
    io.save_map(tmp_path / "m", m)
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-4])
    with pytest.raises(io.FormatError):
        io.load(tmp_path / "t")


def test_atomic_output_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with io.atomic_output(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert os.listdir(tmp_path) == []


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.random((6, 9, 3))
    # include bytes that look like whitespace right after the header
    img[0, 0] = [10 / 255, 32 / 255, 9 / 255]
    io.write_ppm(tmp_path / "x.ppm", img)
    back = io.read_ppm(tmp_path / "x.ppm")
    assert back.shape == (6, 9, 3)
    assert np.array_equal(np.rint(back * 255), np.rint(img * 255))
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n9 6\n255\n")
    with pytest.raises(ValueError):
        io.write_ppm(tmp_path / "y.ppm", np.zeros((3, 3)))


def test_same_input_same_bytes(tmp_path, rng):
    m = HealpixMap(2, rng.random((32, 2)))
    io.save_map(tmp_path / "a", m)
    io.save_map(tmp_path / "b", m)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
