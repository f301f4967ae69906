"""Index plans for windowed attention on the nested HEALPix list.

Patches and windows are runs of consecutive nested indices, so every plan in
this module is an integer array. A :class:`ShiftPlan` is used as a gather:
``shifted = x[plan.forward]`` and ``x = shifted[plan.inverse]``.
"""
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import healpix


class PlanError(ValueError):
    pass


def is_power_of_four(n):
    n = int(n)
    return n >= 1 and n & (n - 1) == 0 and (n.bit_length() - 1) % 2 == 0


def subset_base8(nside):
    """Nested index range ``(0, 8 * nside**2)`` of the first eight base pixels."""
    nside = healpix.check_nside(nside)
    return 0, 8 * nside * nside


@dataclass(frozen=True)
class PatchGrid:
    """Patches of ``patch_size`` consecutive pixels; patch k is a pixel at ``nside``."""

    nside: int
    patch_size: int = 1
    num_faces: int = 8

    def __post_init__(self):
        healpix.check_nside(self.nside)
        if not is_power_of_four(self.patch_size):
            raise PlanError(f"patch size must be a power of four, got {self.patch_size}")
        if self.num_faces not in (8, 12):
            raise PlanError(f"num_faces must be 8 or 12, got {self.num_faces}")

    @property
    def length(self):
        return self.num_faces * self.nside * self.nside

    @property
    def pixel_nside(self):
        return self.nside * math.isqrt(self.patch_size)

    def pixel_range(self, k):
        return k * self.patch_size, (k + 1) * self.patch_size


def build_patches(nside_pixels, patch_size, num_faces=8):
    nside_pixels = healpix.check_nside(nside_pixels)
    if not is_power_of_four(patch_size):
        raise PlanError(f"patch size must be a power of four, got {patch_size}")
    side = math.isqrt(patch_size)
    if side > nside_pixels:
        raise PlanError(f"patch size {patch_size} too large for nside={nside_pixels}")
    return PatchGrid(nside_pixels // side, patch_size, num_faces)


@dataclass(frozen=True)
class WindowPartition:
    grid: PatchGrid
    window_size: int

    @property
    def num_windows(self):
        return self.grid.length // self.window_size

    @property
    def windows_per_face(self):
        return self.num_windows // self.grid.num_faces

    def window_range(self, w):
        return w * self.window_size, (w + 1) * self.window_size


def partition_windows(grid, window_size):
    if not is_power_of_four(window_size):
        raise PlanError(f"window size must be a power of four, got {window_size}")
    if grid.length % window_size:
        raise PlanError(f"{grid.length} patches are not divisible into windows of {window_size}")
    return WindowPartition(grid, window_size)


def merge_index(grid):
    """Coarse grid where patch k joins fine patches ``4k .. 4k+3``."""
    if grid.nside < 2:
        raise PlanError("cannot merge patches below nside=1")
    return PatchGrid(grid.nside // 2, grid.patch_size * 4, grid.num_faces)


def expand_index(grid):
    """Inverse of :func:`merge_index` on the index structure."""
    if grid.patch_size < 4:
        raise PlanError("cannot expand a grid of single-pixel patches")
    return PatchGrid(grid.nside * 2, grid.patch_size // 4, grid.num_faces)


@dataclass(frozen=True, eq=False)
class ShiftPlan:
    forward: np.ndarray
    inverse: np.ndarray
    origin_group: np.ndarray
    strategy: str
    shift: int
    nside: int
    num_faces: int

    @property
    def length(self):
        return self.forward.shape[0]

    @property
    def masked(self):
        return bool(np.any(self.origin_group != self.origin_group[0]))

    def apply(self, x, axis=0):
        return np.take(x, self.forward, axis=axis)

    def undo(self, x, axis=0):
        return np.take(x, self.inverse, axis=axis)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _make_plan(forward, origin_group, strategy, shift, grid):
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(forward.shape[0], dtype=np.int64)
    _freeze(forward, inverse, origin_group)
    return ShiftPlan(forward, inverse, origin_group, strategy, int(shift), grid.nside, grid.num_faces)


def ring_order(nside, num_faces=8):
    """Nested indices of the subset sorted into ring order."""
    nest = np.arange(num_faces * nside * nside, dtype=np.int64)
    ring = healpix.nest_to_ring(nside, nest)
    order = np.argsort(ring, kind="stable")
    return nest[order], ring[order]


def _check_shift(shift, upper, what):
    if int(shift) != shift or not 0 <= shift < upper:
        raise PlanError(f"{what} shift must be an integer in [0, {upper}), got {shift}")
    return int(shift)


@functools.lru_cache(maxsize=None)
def _spiral(nside, num_faces, shift):
    grid = PatchGrid(nside, 1, num_faces)
    n = grid.length
    shift = _check_shift(shift, n, "spiral")
    nest_sorted, ring_sorted = ring_order(nside, num_faces)

    # a segment is a maximal run of the restricted ring list with no skipped ring index
    breaks = np.concatenate([[0], (np.diff(ring_sorted) != 1).astype(np.int64)])
    segment = np.cumsum(breaks)
    pos = np.arange(n)
    src = (pos - shift) % n
    # patches that stayed inside their segment keep group 0; anything that jumped a
    # gap or wrapped around the list end is labelled by where it came from
    jumped = (segment[src] != segment[pos]) | (pos < shift)
    label = np.where(jumped, 1 + segment[src] + np.where(pos < shift, segment[-1] + 1, 0), 0)

    forward = np.empty(n, dtype=np.int64)
    forward[nest_sorted] = nest_sorted[src]
    origin_group = np.empty(n, dtype=np.int64)
    origin_group[nest_sorted] = label
    return _make_plan(forward, origin_group, "spiral", shift, grid)


def spiral_shift_plan(grid, shift):
    """Roll the ring-ordered subset list by ``shift`` patches.

    The patch at ring position ``j - shift`` ends up at ring position ``j``.
    """
    return _spiral(grid.nside, grid.num_faces, int(shift))


@functools.lru_cache(maxsize=None)
def _grid(nside, num_faces, shift):
    grid = PatchGrid(nside, 1, num_faces)
    shift = _check_shift(shift, nside, "grid")
    dest = np.arange(grid.length, dtype=np.int64)
    face, x, y = healpix.local_xy(nside, dest)
    sx = (x - shift) % nside
    sy = (y - shift) % nside
    forward = healpix.xy_to_nest(nside, face, sx, sy)
    # same four-region labelling as the flat cyclic shift
    origin_group = (sx + shift >= nside).astype(np.int64) + 2 * (sy + shift >= nside).astype(np.int64)
    return _make_plan(forward, origin_group, "grid", shift, grid)


def grid_shift_plan(grid, shift):
    """Roll every face along its local x and y axes by ``shift`` patches."""
    return _grid(grid.nside, grid.num_faces, int(shift))


def shift_plan(grid, shift, strategy="spiral"):
    if strategy == "spiral":
        return spiral_shift_plan(grid, shift)
    if strategy == "grid":
        return grid_shift_plan(grid, shift)
    raise PlanError(f"unknown shift strategy {strategy!r}")


def identity_plan(grid):
    n = grid.length
    return _make_plan(np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64), "none", 0, grid)


def attention_mask(plan, part):
    """Boolean ``(num_windows, window_size, window_size)``; True means attend."""
    if plan.length != part.grid.length or plan.nside != part.grid.nside:
        raise PlanError(f"plan of length {plan.length} does not match grid of length {part.grid.length}")
    g = plan.origin_group.reshape(part.num_windows, part.window_size)
    return g[:, :, None] == g[:, None, :]


def rel_pos_index(window_size):
    """Map each in-window pair ``(i, j)`` to a row of the relative position bias table."""
    if not is_power_of_four(window_size):
        raise PlanError(f"window size must be a power of four, got {window_size}")
    return _rel_pos_index(int(window_size))


@functools.lru_cache(maxsize=None)
def _rel_pos_index(window_size):
    s = math.isqrt(window_size)
    k = np.arange(window_size, dtype=np.int64)
    x = healpix.compact_bits(k)
    y = healpix.compact_bits(k >> 1)
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    idx = (dx + s - 1) * (2 * s - 1) + (dy + s - 1)
    idx.setflags(write=False)
    return idx


def layer_chain(nside, patch_size=4, window_size=64, num_stages=4, num_faces=8):
    """Spatial sizes through the UNet: input, encoder stages, decoder stages, output."""
    grid = build_patches(nside, patch_size, num_faces)
    rows = [_row("input", num_faces * nside * nside, window_size, num_faces, nside, "patch embedding")]
    grids = [grid]
    for _ in range(num_stages - 1):
        grids.append(merge_index(grids[-1]))
    stage_grids = grids + grids[-2::-1]
    for i, g in enumerate(stage_grids):
        if i + 1 < num_stages:
            nxt = "patch merging"
        else:
            nxt = "patch expansion"
        rows.append(_row(f"block {i + 1}", g.length, window_size, num_faces, g.nside, nxt))
    rows.append(_row("output", num_faces * nside * nside, window_size, num_faces, nside, None))
    return rows


def effective_window(nside, window_size):
    return min(window_size, nside * nside)


def _row(name, length, window_size, num_faces, nside, followed_by):
    ws = effective_window(nside, window_size)
    windows = length // ws
    return {
        "layer": name,
        "pixels": length,
        "windows": windows,
        "windows_per_base_pixel": windows // num_faces,
        "nside": nside,
        "window_size": ws,
        "followed_by": followed_by,
    }
