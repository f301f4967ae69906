"""The HSWM1 container and the files built on it.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
an optional validity bitmap (``packbits``, little bit order) and the payload
in little-endian order. Maps store float32 in nested order, channel-minor.
"""
import json
import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

from .maps import HealpixMap, ImageRaster

MAGIC = b"HSWM1\0\0\0"
_DTYPES = {"f32le": np.dtype("<f4"), "i64le": np.dtype("<i8"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    pass


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextmanager
def atomic_output(path, mode="wb"):
    """Write to a temporary sibling and rename on success; nothing is left behind on failure."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    with atomic_output(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dumps(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header, payload, validity=None):
    header = dict(header)
    dtype = _DTYPES[header["dtype"]]
    header["validity"] = validity is not None
    body = _dumps(header)
    with atomic_output(path) as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)
        if validity is not None:
            fh.write(np.packbits(np.asarray(validity, dtype=bool).ravel(), bitorder="little").tobytes())
        fh.write(np.ascontiguousarray(payload, dtype=dtype).tobytes())


def read_container(path):
    """``(header, validity or None, flat payload)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not an HSWM1 file")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    pos = 12 + hlen
    n = int(header.get("count", 0))
    validity = None
    if header.get("validity"):
        nbytes = (n + 7) // 8
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=pos)
        validity = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
        pos += nbytes
    dtype = _DTYPES[header["dtype"]]
    if (len(raw) - pos) % dtype.itemsize:
        raise FormatError(f"{path}: payload is not a whole number of {header['dtype']} items")
    payload = np.frombuffer(raw, dtype=dtype, offset=pos).copy()
    expected = int(header.get("size", payload.size))
    if payload.size != expected:
        raise FormatError(f"{path}: payload has {payload.size} items, header says {expected}")
    return header, validity, payload


# --- maps and rasters ------------------------------------------------------------------------


def save_map(path, hmap, extra=None):
    header = {
        "nside": hmap.nside,
        "num_faces": hmap.num_faces,
        "scheme": "nested",
        "channels": list(hmap.channel_names) or [f"c{i}" for i in range(hmap.channels)],
        "dtype": "f32le",
        "count": hmap.num_pixels,
        "size": hmap.data.size,
    }
    if extra:
        header["extra"] = extra
    write_container(path, header, hmap.data, hmap.validity)


def save_raster(path, raster, extra=None):
    header = {
        "scheme": "raster",
        "height": raster.height,
        "width": raster.width,
        "channels": list(raster.channel_names) or [f"c{i}" for i in range(raster.channels)],
        "dtype": "f32le",
        "count": raster.height * raster.width,
        "size": raster.data.size,
    }
    if extra:
        header["extra"] = extra
    write_container(path, header, raster.data, raster.validity)


def load(path):
    """A ``HealpixMap`` or ``ImageRaster`` depending on the file's scheme."""
    header, validity, payload = read_container(path)
    scheme = header.get("scheme")
    channels = header.get("channels", [])
    if scheme == "nested":
        data = payload.reshape(-1, len(channels))
        return HealpixMap(header["nside"], data, validity, header["num_faces"], list(channels))
    if scheme == "raster":
        data = payload.reshape(header["height"], header["width"], len(channels))
        return ImageRaster(data, None if validity is None else validity.reshape(data.shape[:2]), list(channels))
    raise FormatError(f"{path}: scheme {scheme!r} is not a map or raster")


def load_header(path):
    return read_container(path)[0]


# --- plans and masks ----------------------------------------------------------------------


def save_plan(path, plan):
    arrays = np.stack([plan.forward, plan.inverse, plan.origin_group], axis=1)
    header = {
        "scheme": "plan",
        "dtype": "i64le",
        "channels": ["forward", "inverse", "origin_group"],
        "strategy": plan.strategy,
        "shift": int(plan.shift),
        "nside": int(plan.nside),
        "num_faces": int(plan.num_faces),
        "count": int(plan.length),
        "size": int(arrays.size),
    }
    write_container(path, header, arrays)


def load_plan(path):
    from .windows import ShiftPlan

    header, _, payload = read_container(path)
    if header.get("scheme") != "plan":
        raise FormatError(f"{path}: not a plan file")
    a = payload.reshape(-1, 3)
    return ShiftPlan(
        forward=a[:, 0].copy(),
        inverse=a[:, 1].copy(),
        origin_group=a[:, 2].copy(),
        strategy=header["strategy"],
        shift=header["shift"],
        nside=header["nside"],
        num_faces=header["num_faces"],
    )


def save_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    header = {"scheme": "mask", "dtype": "u8", "shape": list(mask.shape), "size": int(mask.size)}
    write_container(path, header, mask.astype(np.uint8))


def load_mask(path):
    header, _, payload = read_container(path)
    if header.get("scheme") != "mask":
        raise FormatError(f"{path}: not a mask file")
    return payload.reshape(header["shape"]).astype(bool)


# --- checkpoints -----------------------------------------------------------------------------


def save_checkpoint(path, state, config=None, extra=None):
    names = sorted(state)
    manifest = [{"name": k, "shape": list(np.shape(state[k]))} for k in names]
    flat = np.concatenate([np.asarray(state[k], dtype=np.float32).ravel() for k in names]) if names else np.zeros(0)
    header = {"scheme": "checkpoint", "dtype": "f32le", "tensors": manifest, "size": int(flat.size)}
    if config is not None:
        header["config"] = config
    if extra:
        header["extra"] = extra
    write_container(path, header, flat)


def load_checkpoint(path):
    """``(state, config, header)``."""
    header, _, payload = read_container(path)
    if header.get("scheme") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    state, pos = {}, 0
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        state[entry["name"]] = payload[pos : pos + n].reshape(entry["shape"])
        pos += n
    return state, header.get("config"), header


# --- PPM -----------------------------------------------------------------------------------------


def write_ppm(path, rgb):
    """Binary PPM from an (H, W, 3) array in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    img = np.clip(np.rint(np.nan_to_num(rgb) * 255.0), 0, 255).astype(np.uint8)
    with atomic_output(path) as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
