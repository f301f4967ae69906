"""HEALPix pixelization on numpy arrays.

Standard conventions: base pixels 0-3 touch the north pole, 4-7 sit on the
equator, 8-11 touch the south pole. Inside a base pixel the nested index is
the Z-order interleave of the local coordinates, ``x`` on even bits and ``y``
on odd bits. Angles are colatitude ``theta`` in [0, pi] and azimuth ``phi``
in [0, 2 pi).

Every index kernel exists twice: a scalar loop compiled with numba and a
vectorized numpy version. ``HEALSWIN_NUMBA=0`` selects the numpy path.
"""
import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# row (in units of nside) of the southernmost corner, and azimuth offset, per base pixel
JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4], dtype=np.int64)
JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7], dtype=np.int64)

NUM_BASE_PIXELS = 12
MAX_ORDER = 29

_SQRT6 = math.sqrt(6.0)
_TWO_PI = 2.0 * math.pi


class HealpixError(ValueError):
    pass


def check_nside(nside):
    """Return ``nside`` as int after checking it is a positive power of two."""
    n = int(nside)
    if n != nside or n < 1 or n & (n - 1) or n > 1 << MAX_ORDER:
        raise HealpixError(f"nside must be a power of two in [1, 2**{MAX_ORDER}], got {nside!r}")
    return n


def npix(nside):
    nside = check_nside(nside)
    return 12 * nside * nside


def _as_pix(nside, ipix, num_faces=NUM_BASE_PIXELS):
    p = np.asarray(ipix)
    if p.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(p, 1), 0)):
            raise HealpixError("pixel indices must be integers")
    p = p.astype(np.int64)
    n = num_faces * nside * nside
    if p.size and (p.min() < 0 or p.max() >= n):
        raise HealpixError(f"pixel index out of range [0, {n}) for nside={nside}")
    return p


# --- Z-order bit helpers, shared by both paths ------------------------------


@njit
def spread_bits(v):
    """Move bit k of ``v`` to bit 2k (32 input bits)."""
    v = v & 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


@njit
def compact_bits(v):
    """Inverse of :func:`spread_bits`: gather the even bits of ``v``."""
    v = v & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0xFFFFFFFF
    return v


# --- scalar kernels (numba path) --------------------------------------------


@njit
def _nest2xyf_scalar(nside, pix):
    npface = nside * nside
    face = pix // npface
    ipf = pix - face * npface
    return face, compact_bits(ipf), compact_bits(ipf >> 1)


@njit
def _xyf2nest_scalar(nside, face, x, y):
    return face * nside * nside + spread_bits(x) + (spread_bits(y) << 1)


@njit
def _xyf2ring_scalar(nside, face, x, y):
    nl4 = 4 * nside
    npix_ = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    jr = JRLL[face] * nside - x - y - 1
    if jr < nside:
        nr = jr
        n_before = 2 * nr * (nr - 1)
        kshift = 0
    elif jr > 3 * nside:
        nr = nl4 - jr
        n_before = npix_ - 2 * nr * (nr + 1)
        kshift = 0
    else:
        nr = nside
        n_before = ncap + (jr - nside) * nl4
        kshift = (jr - nside) & 1
    jp = (JPLL[face] * nr + x - y + 1 + kshift) // 2
    if jp > 4 * nr:
        jp -= 4 * nr
    elif jp < 1:
        jp += 4 * nr
    return n_before + jp - 1


@njit
def _isqrt(v):
    s = np.int64(math.sqrt(v))
    while s * s > v:
        s -= 1
    while (s + 1) * (s + 1) <= v:
        s += 1
    return s


@njit
def _ring2xyf_scalar(nside, pix):
    nl2 = 2 * nside
    nl4 = 4 * nside
    npix_ = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    if pix < ncap:
        iring = (1 + _isqrt(1 + 2 * pix)) >> 1
        iphi = pix + 1 - 2 * iring * (iring - 1)
        kshift = 0
        nr = iring
        face = (iphi - 1) // nr
    elif pix < npix_ - ncap:
        ip = pix - ncap
        tmp = ip // nl4
        iring = tmp + nside
        iphi = ip - tmp * nl4 + 1
        kshift = (iring + nside) & 1
        nr = nside
        ire = tmp + 1
        irm = nl2 + 1 - tmp
        ifm = (iphi - (ire >> 1) + nside - 1) // nside
        ifp = (iphi - (irm >> 1) + nside - 1) // nside
        if ifp == ifm:
            face = ifp | 4
        elif ifp < ifm:
            face = ifp
        else:
            face = ifm + 8
    else:
        ip = npix_ - pix
        iring = (1 + _isqrt(2 * ip - 1)) >> 1
        iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1))
        kshift = 0
        nr = iring
        iring = 2 * nl2 - iring
        face = 8 + (iphi - 1) // nr
    irt = iring - (2 + (face >> 2)) * nside + 1
    ipt = 2 * iphi - JPLL[face] * nr - kshift - 1
    if ipt >= nl2:
        ipt -= 8 * nside
    return face, (ipt - irt) >> 1, (-ipt - irt) >> 1


@njit
def _nest2ring_loop(nside, pix):
    out = np.empty(pix.shape[0], dtype=np.int64)
    for i in range(pix.shape[0]):
        f, x, y = _nest2xyf_scalar(nside, pix[i])
        out[i] = _xyf2ring_scalar(nside, f, x, y)
    return out


@njit
def _ring2nest_loop(nside, pix):
    out = np.empty(pix.shape[0], dtype=np.int64)
    for i in range(pix.shape[0]):
        f, x, y = _ring2xyf_scalar(nside, pix[i])
        out[i] = _xyf2nest_scalar(nside, f, x, y)
    return out


@njit
def _pix2ang_nest_loop(nside, pix):
    n = pix.shape[0]
    theta = np.empty(n)
    phi = np.empty(n)
    for i in range(n):
        face, x, y = _nest2xyf_scalar(nside, pix[i])
        jr = JRLL[face] * nside - x - y - 1
        if jr < nside:
            nr = jr
            theta[i] = 2.0 * math.asin(nr / (_SQRT6 * nside))
        elif jr > 3 * nside:
            nr = 4 * nside - jr
            theta[i] = math.pi - 2.0 * math.asin(nr / (_SQRT6 * nside))
        else:
            nr = nside
            theta[i] = math.acos((2 * nside - jr) * 2.0 / (3.0 * nside))
        t = JPLL[face] * nr + x - y
        if t < 0:
            t += 8 * nr
        phi[i] = t * (math.pi / (4.0 * nr))
    return theta, phi


@njit
def _ang2nest_loop(nside, theta, phi):
    n = theta.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        z = math.cos(theta[i])
        za = abs(z)
        tt = (phi[i] % _TWO_PI) * (2.0 / math.pi)
        if tt >= 4.0:
            tt = 0.0
        if za <= 2.0 / 3.0:
            temp1 = nside * (0.5 + tt)
            temp2 = nside * (z * 0.75)
            jp = np.int64(math.floor(temp1 - temp2))
            jm = np.int64(math.floor(temp1 + temp2))
            ifp = jp // nside
            ifm = jm // nside
            if ifp == ifm:
                face = ifp | 4
            elif ifp < ifm:
                face = ifp
            else:
                face = ifm + 8
            ix = jm & (nside - 1)
            iy = nside - (jp & (nside - 1)) - 1
        else:
            ntt = min(3, np.int64(tt))
            tp = tt - ntt
            if z > 0.0:
                tmp = nside * _SQRT6 * math.sin(0.5 * theta[i])
            else:
                tmp = nside * _SQRT6 * math.cos(0.5 * theta[i])
            jp = min(nside - 1, np.int64(tp * tmp))
            jm = min(nside - 1, np.int64((1.0 - tp) * tmp))
            if z > 0.0:
                face = ntt
                ix = nside - jm - 1
                iy = nside - jp - 1
            else:
                face = ntt + 8
                ix = jp
                iy = jm
        out[i] = _xyf2nest_scalar(nside, face, ix, iy)
    return out


# --- vectorized kernels (numpy path) ----------------------------------------


def _isqrt_np(v):
    s = np.floor(np.sqrt(v.astype(np.float64))).astype(np.int64)
    s = np.where(s * s > v, s - 1, s)
    return np.where((s + 1) * (s + 1) <= v, s + 1, s)


def _nest2xyf_np(nside, pix):
    npface = nside * nside
    face = pix // npface
    ipf = pix - face * npface
    return face, compact_bits(ipf), compact_bits(ipf >> 1)


def _xyf2nest_np(nside, face, x, y):
    return face * nside * nside + spread_bits(x) + (spread_bits(y) << 1)


def _nest2ring_np(nside, pix):
    face, x, y = _nest2xyf_np(nside, pix)
    nl4 = 4 * nside
    ncap = 2 * nside * (nside - 1)
    jr = JRLL[face] * nside - x - y - 1
    north = jr < nside
    south = jr > 3 * nside
    nr = np.where(north, jr, np.where(south, nl4 - jr, nside))
    n_before = np.where(
        north,
        2 * nr * (nr - 1),
        np.where(south, 12 * nside * nside - 2 * nr * (nr + 1), ncap + (jr - nside) * nl4),
    )
    kshift = np.where(north | south, 0, (jr - nside) & 1)
    jp = (JPLL[face] * nr + x - y + 1 + kshift) // 2
    jp = np.where(jp > 4 * nr, jp - 4 * nr, jp)
    jp = np.where(jp < 1, jp + 4 * nr, jp)
    return n_before + jp - 1


def _ring2nest_np(nside, pix):
    nl2 = 2 * nside
    nl4 = 4 * nside
    npix_ = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    iring = np.empty_like(pix)
    iphi = np.empty_like(pix)
    kshift = np.zeros_like(pix)
    nr = np.empty_like(pix)
    face = np.empty_like(pix)

    m = pix < ncap
    p = pix[m]
    r = (1 + _isqrt_np(1 + 2 * p)) >> 1
    ph = p + 1 - 2 * r * (r - 1)
    iring[m], iphi[m], nr[m], face[m] = r, ph, r, (ph - 1) // r

    m = (pix >= ncap) & (pix < npix_ - ncap)
    ip = pix[m] - ncap
    tmp = ip // nl4
    r = tmp + nside
    ph = ip - tmp * nl4 + 1
    ifm = (ph - ((tmp + 1) >> 1) + nside - 1) // nside
    ifp = (ph - ((nl2 + 1 - tmp) >> 1) + nside - 1) // nside
    iring[m], iphi[m], nr[m] = r, ph, nside
    kshift[m] = (r + nside) & 1
    face[m] = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))

    m = pix >= npix_ - ncap
    ip = npix_ - pix[m]
    r = (1 + _isqrt_np(2 * ip - 1)) >> 1
    ph = 4 * r + 1 - (ip - 2 * r * (r - 1))
    iring[m], iphi[m], nr[m] = 2 * nl2 - r, ph, r
    face[m] = 8 + (ph - 1) // r

    irt = iring - (2 + (face >> 2)) * nside + 1
    ipt = 2 * iphi - JPLL[face] * nr - kshift - 1
    ipt = np.where(ipt >= nl2, ipt - 8 * nside, ipt)
    return _xyf2nest_np(nside, face, (ipt - irt) >> 1, (-ipt - irt) >> 1)


def _pix2ang_nest_np(nside, pix):
    face, x, y = _nest2xyf_np(nside, pix)
    jr = JRLL[face] * nside - x - y - 1
    north = jr < nside
    south = jr > 3 * nside
    nr = np.where(north, jr, np.where(south, 4 * nside - jr, nside))
    cap = 2.0 * np.arcsin(nr / (_SQRT6 * nside))
    eq = np.arccos(np.clip((2 * nside - jr) * 2.0 / (3.0 * nside), -1.0, 1.0))
    theta = np.where(north, cap, np.where(south, np.pi - cap, eq))
    t = JPLL[face] * nr + x - y
    t = np.where(t < 0, t + 8 * nr, t)
    phi = t * (np.pi / (4.0 * nr))
    return theta, phi


def _ang2nest_np(nside, theta, phi):
    z = np.cos(theta)
    za = np.abs(z)
    tt = np.mod(phi, _TWO_PI) * (2.0 / np.pi)
    tt = np.where(tt >= 4.0, 0.0, tt)

    temp1 = nside * (0.5 + tt)
    temp2 = nside * (z * 0.75)
    jp = np.floor(temp1 - temp2).astype(np.int64)
    jm = np.floor(temp1 + temp2).astype(np.int64)
    ifp = jp // nside
    ifm = jm // nside
    face_e = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))
    ix_e = jm & (nside - 1)
    iy_e = nside - (jp & (nside - 1)) - 1

    ntt = np.minimum(3, tt.astype(np.int64))
    tp = tt - ntt
    northern = z > 0.0
    tmp = nside * _SQRT6 * np.where(northern, np.sin(0.5 * theta), np.cos(0.5 * theta))
    jpc = np.minimum(nside - 1, (tp * tmp).astype(np.int64))
    jmc = np.minimum(nside - 1, ((1.0 - tp) * tmp).astype(np.int64))
    face_c = np.where(northern, ntt, ntt + 8)
    ix_c = np.where(northern, nside - jmc - 1, jpc)
    iy_c = np.where(northern, nside - jpc - 1, jmc)

    equatorial = za <= 2.0 / 3.0
    face = np.where(equatorial, face_e, face_c)
    ix = np.where(equatorial, ix_e, ix_c)
    iy = np.where(equatorial, iy_e, iy_c)
    return _xyf2nest_np(nside, face, ix, iy)


if NUMBA_ENABLED:
    _nest2ring_impl = _nest2ring_loop
    _ring2nest_impl = _ring2nest_loop
    _pix2ang_impl = _pix2ang_nest_loop
    _ang2nest_impl = _ang2nest_loop
else:
    _nest2ring_impl = _nest2ring_np
    _ring2nest_impl = _ring2nest_np
    _pix2ang_impl = _pix2ang_nest_np
    _ang2nest_impl = _ang2nest_np


def _apply(kernel, *arrays):
    shape = np.shape(arrays[-1])
    flat = [np.ascontiguousarray(np.ravel(a)) for a in arrays]
    out = kernel(*flat)
    if isinstance(out, tuple):
        return tuple(o.reshape(shape) for o in out)
    return out.reshape(shape)


# --- public API --------------------------------------------------------------


def nest_to_ring(nside, ipix):
    nside = check_nside(nside)
    p = _as_pix(nside, ipix)
    return _apply(lambda q: _nest2ring_impl(nside, q), p)


def ring_to_nest(nside, ipix):
    nside = check_nside(nside)
    p = _as_pix(nside, ipix)
    return _apply(lambda q: _ring2nest_impl(nside, q), p)


def pix_to_ang(nside, ipix, scheme="nested"):
    """Pixel-center angles ``(theta, phi)``."""
    nside = check_nside(nside)
    p = _as_pix(nside, ipix)
    if scheme == "ring":
        p = ring_to_nest(nside, p)
    elif scheme != "nested":
        raise HealpixError(f"unknown scheme {scheme!r}")
    return _apply(lambda q: _pix2ang_impl(nside, q), p)


def ang_to_pix(nside, theta, phi, scheme="nested"):
    """Index of the pixel containing each direction."""
    nside = check_nside(nside)
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    if not (np.all(theta >= 0.0) and np.all(theta <= np.pi)):
        raise HealpixError("theta must lie in [0, pi]")
    if not np.all(np.isfinite(phi)):
        raise HealpixError("phi must be finite")
    p = _apply(lambda t, f: _ang2nest_impl(nside, t, f), theta, phi)
    if scheme == "ring":
        return nest_to_ring(nside, p)
    if scheme != "nested":
        raise HealpixError(f"unknown scheme {scheme!r}")
    return p


def base_pixel(nside, ipix):
    nside = check_nside(nside)
    return _as_pix(nside, ipix) // (nside * nside)


def local_xy(nside, ipix):
    """``(face, x, y)`` of nested pixels; x from even bits, y from odd bits."""
    nside = check_nside(nside)
    return _nest2xyf_np(nside, _as_pix(nside, ipix))


def xy_to_nest(nside, face, x, y):
    nside = check_nside(nside)
    face, x, y = (np.asarray(a, dtype=np.int64) for a in (face, x, y))
    if np.any((face < 0) | (face >= NUM_BASE_PIXELS)) or np.any((x < 0) | (x >= nside) | (y < 0) | (y >= nside)):
        raise HealpixError("face/x/y out of range")
    return _xyf2nest_np(nside, face, x, y)


def ring_number(nside, ipix):
    """1-based iso-latitude ring index (north to south) of nested pixels."""
    nside = check_nside(nside)
    face, x, y = _nest2xyf_np(nside, _as_pix(nside, ipix))
    return JRLL[face] * nside - x - y - 1


def child_range(nside_coarse, ipix, nside_fine):
    """Nested-index range ``(start, stop)`` of the fine pixels inside a coarse one."""
    nc = check_nside(nside_coarse)
    nf = check_nside(nside_fine)
    if nf <= nc:
        raise HealpixError(f"fine nside {nf} must exceed coarse nside {nc}")
    p = int(_as_pix(nc, ipix))
    r = (nf // nc) ** 2
    return p * r, (p + 1) * r


def ang_to_vec(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def vec_to_ang(vec):
    vec = np.asarray(vec, dtype=np.float64)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    theta = np.arctan2(np.hypot(x, y), z)
    phi = np.mod(np.arctan2(y, x), _TWO_PI)
    phi = np.where(phi >= _TWO_PI, 0.0, phi)
    return theta, phi
