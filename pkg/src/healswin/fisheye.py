"""Radial fisheye camera model and resampling between rasters and HEALPix maps.

The optical axis points at theta = 0. A direction (theta, phi) lands at
``u = cx + r(theta) cos(phi)``, ``v = cy + aspect * r(theta) sin(phi)`` with
``r(theta) = a1 theta + a2 theta^2 + a3 theta^3 + a4 theta^4`` in pixels.
Pixel centers sit at integer (u, v); the raster covers
[-0.5, width - 0.5) x [-0.5, height - 0.5).
"""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import healpix
from ._accel import NUMBA_ENABLED, njit
from .maps import HealpixMap, ImageRaster


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraCalibration:
    poly: tuple
    cx: float
    cy: float
    aspect: float = 1.0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        poly = tuple(float(a) for a in self.poly)
        if len(poly) != 4:
            raise CalibrationError(f"poly needs four coefficients, got {len(poly)}")
        object.__setattr__(self, "poly", poly)
        if self.aspect <= 0:
            raise CalibrationError("aspect must be positive")
        if self.width < 0 or self.height < 0:
            raise CalibrationError("raster size must be nonnegative")
        if self.d_radius(0.0) <= 0.0:
            raise CalibrationError("r(theta) must increase at theta=0")

    def radius(self, theta):
        a1, a2, a3, a4 = self.poly
        t = np.asarray(theta, dtype=np.float64)
        return t * (a1 + t * (a2 + t * (a3 + t * a4)))

    def d_radius(self, theta):
        a1, a2, a3, a4 = self.poly
        t = np.asarray(theta, dtype=np.float64)
        return a1 + t * (2 * a2 + t * (3 * a3 + t * 4 * a4))

    @property
    def theta_max(self):
        """Largest colatitude up to which r(theta) is strictly increasing (at most pi)."""
        return _theta_max(self.poly)

    @property
    def radius_max(self):
        return float(self.radius(self.theta_max))

    def invert_radius(self, r):
        """theta with r(theta) = r, by bisection on [0, theta_max]; NaN beyond the lens."""
        r = np.asarray(r, dtype=np.float64)
        lo = np.zeros_like(r)
        hi = np.full_like(r, self.theta_max)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = self.radius(mid) < r
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        theta = 0.5 * (lo + hi)
        return np.where((r < 0) | (r > self.radius_max), np.nan, theta)

    def to_dict(self):
        d = asdict(self)
        d["poly"] = list(self.poly)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        keys = {"poly", "cx", "cy", "aspect", "width", "height"}
        missing = {"poly", "cx", "cy"} - set(d)
        if missing:
            raise CalibrationError(f"calibration is missing keys {sorted(missing)}")
        unknown = set(d) - keys
        if unknown:
            raise CalibrationError(f"unknown calibration keys {sorted(unknown)}")
        return cls(
            poly=d["poly"],
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            aspect=float(d.get("aspect", 1.0)),
            width=int(d.get("width", 0)),
            height=int(d.get("height", 0)),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _theta_max(poly):
    cal_d = lambda t: poly[0] + t * (2 * poly[1] + t * (3 * poly[2] + t * 4 * poly[3]))  # noqa: E731
    grid = np.linspace(0.0, math.pi, 4097)
    bad = np.nonzero(cal_d(grid) <= 0.0)[0]
    if bad.size == 0:
        return math.pi
    lo, hi = grid[bad[0] - 1], grid[bad[0]]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if cal_d(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def default_camera(width=256, height=None, fov=math.pi):
    """Equidistant lens whose ``fov / 2`` edge ray lands on the inscribed circle."""
    height = width if height is None else height
    f = 0.5 * min(width, height) / (0.5 * fov)
    return CameraCalibration(poly=(f, 0.0, 0.0, 0.0), cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


def project_sphere_to_image(cal, theta, phi):
    """Image coordinates ``(u, v, in_bounds)`` of directions."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    r = cal.radius(theta)
    u = cal.cx + r * np.cos(phi)
    v = cal.cy + cal.aspect * r * np.sin(phi)
    inb = (theta <= cal.theta_max) & (u >= -0.5) & (u < cal.width - 0.5) & (v >= -0.5) & (v < cal.height - 0.5)
    return u, v, inb


def back_project(cal, u, v):
    """Directions ``(theta, phi, valid)`` seen by image points; invalid beyond the lens."""
    dx = np.asarray(u, dtype=np.float64) - cal.cx
    dy = (np.asarray(v, dtype=np.float64) - cal.cy) / cal.aspect
    r = np.hypot(dx, dy)
    phi = np.mod(np.arctan2(dy, dx), 2 * math.pi)
    phi = np.where(phi >= 2 * math.pi, 0.0, phi)
    theta = cal.invert_radius(r)
    valid = ~np.isnan(theta)
    return np.where(valid, theta, 0.0), phi, valid


def raster_angles(cal, width=None, height=None):
    width = cal.width if width is None else width
    height = cal.height if height is None else height
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return back_project(cal, u, v)


# --- sampling kernels --------------------------------------------------------------


@njit
def _bilinear_loop(data, valid, u, v):
    H, W, C = data.shape
    n = u.shape[0]
    out = np.zeros((n, C), dtype=np.float32)
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x0 = int(math.floor(u[i]))
        y0 = int(math.floor(v[i]))
        fx = u[i] - x0
        fy = v[i] - y0
        any_in = False
        wsum = 0.0
        acc = np.zeros(C)
        for dy in range(2):
            for dx in range(2):
                x = x0 + dx
                y = y0 + dy
                if 0 <= x < W and 0 <= y < H:
                    any_in = True
                xc = min(max(x, 0), W - 1)
                yc = min(max(y, 0), H - 1)
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                if valid[yc, xc] and w > 0.0:
                    wsum += w
                    for c in range(C):
                        acc[c] += w * data[yc, xc, c]
        if any_in and wsum > 0.0:
            ok[i] = True
            for c in range(C):
                out[i, c] = acc[c] / wsum
    return out, ok


def _bilinear_np(data, valid, u, v):
    H, W, C = data.shape
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    any_in = np.zeros(u.shape, dtype=bool)
    wsum = np.zeros(u.shape)
    acc = np.zeros(u.shape + (C,))
    for dy in (0, 1):
        for dx in (0, 1):
            x = x0 + dx
            y = y0 + dy
            any_in |= (x >= 0) & (x < W) & (y >= 0) & (y < H)
            xc = np.clip(x, 0, W - 1)
            yc = np.clip(y, 0, H - 1)
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            w = np.where(valid[yc, xc] & (w > 0.0), w, 0.0)
            wsum += w
            acc += w[:, None] * data[yc, xc]
    ok = any_in & (wsum > 0.0)
    out = np.zeros(u.shape + (C,), dtype=np.float32)
    out[ok] = acc[ok] / wsum[ok, None]
    return out, ok


@njit
def _nearest_loop(data, valid, u, v):
    H, W, C = data.shape
    n = u.shape[0]
    out = np.zeros((n, C), dtype=np.float32)
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = int(math.floor(u[i] + 0.5))
        y = int(math.floor(v[i] + 0.5))
        if 0 <= x < W and 0 <= y < H and valid[y, x]:
            ok[i] = True
            for c in range(C):
                out[i, c] = data[y, x, c]
    return out, ok


def _nearest_np(data, valid, u, v):
    H, W, C = data.shape
    x = np.floor(u + 0.5).astype(np.int64)
    y = np.floor(v + 0.5).astype(np.int64)
    inb = (x >= 0) & (x < W) & (y >= 0) & (y < H)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    ok = inb & valid[yc, xc]
    out = np.where(ok[:, None], data[yc, xc], 0.0).astype(np.float32)
    return out, ok


_SAMPLERS = {
    "bilinear": _bilinear_loop if NUMBA_ENABLED else _bilinear_np,
    "nearest": _nearest_loop if NUMBA_ENABLED else _nearest_np,
}


def sample_raster(img, u, v, interp="bilinear"):
    """Sample ``img`` at points ``(u, v)``; returns ``(values (n, C), ok (n,))``."""
    if interp not in _SAMPLERS:
        raise ValueError(f"unknown interpolation {interp!r}")
    u = np.ascontiguousarray(np.ravel(u), dtype=np.float64)
    v = np.ascontiguousarray(np.ravel(v), dtype=np.float64)
    data = np.ascontiguousarray(img.data, dtype=np.float32)
    valid = np.ascontiguousarray(img.validity, dtype=np.bool_)
    return _SAMPLERS[interp](data, valid, u, v)


# --- resampling ----------------------------------------------------------------------


def _with_raster_size(cal, img):
    if cal.width == img.width and cal.height == img.height:
        return cal
    return CameraCalibration(cal.poly, cal.cx, cal.cy, cal.aspect, img.width, img.height)


def resample_to_healpix(img, cal, nside, interp="bilinear", num_faces=8):
    """Sample a fisheye raster at the centers of the subset's pixels."""
    cal = _with_raster_size(cal, img)
    n = num_faces * nside * nside
    theta, phi = healpix.pix_to_ang(nside, np.arange(n))
    u, v, inb = project_sphere_to_image(cal, theta, phi)
    values, ok = sample_raster(img, u, v, interp)
    ok &= inb
    values[~ok] = 0.0
    return HealpixMap(nside, values, ok, num_faces, list(img.channel_names))


def raster_pixels(cal, width, height, nside, num_faces=8):
    """Nested pixel hit by each raster pixel and whether it is inside the subset."""
    theta, phi, valid = raster_angles(cal, width, height)
    pix = healpix.ang_to_pix(nside, theta, phi)
    covered = valid & (pix < num_faces * nside * nside)
    return np.where(covered, pix, 0), covered


def coverage_mask(cal, width, height, nside, num_faces=8):
    return raster_pixels(cal, width, height, nside, num_faces)[1]


def resample_to_raster(hmap, cal, width, height, interp="nearest"):
    """Nearest-pixel back-projection of a map; returns ``(raster, coverage)``."""
    if interp != "nearest":
        raise ValueError("only nearest interpolation is supported for map-to-raster")
    pix, covered = raster_pixels(cal, width, height, hmap.nside, hmap.num_faces)
    data = np.where(covered[..., None], hmap.data[pix], 0.0)
    valid = covered & hmap.validity[pix]
    data[~valid] = 0.0
    return ImageRaster(data, valid, list(hmap.channel_names)), covered
