"""Containers for data on the HEALPix subset and on flat rasters."""
from dataclasses import dataclass, field

import numpy as np

from . import healpix


@dataclass
class HealpixMap:
    """Per-pixel channels in nested order, shape ``(num_faces * nside**2, channels)``."""

    nside: int
    data: np.ndarray
    validity: np.ndarray = None
    num_faces: int = 8
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        healpix.check_nside(self.nside)
        if self.num_faces not in (8, 12):
            raise ValueError(f"num_faces must be 8 or 12, got {self.num_faces}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != self.num_pixels:
            raise ValueError(f"map data has {data.shape[0]} pixels, expected {self.num_pixels}")
        self.data = data
        if self.validity is None:
            self.validity = np.ones(self.num_pixels, dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool).reshape(self.num_pixels)

    @property
    def num_pixels(self):
        return self.num_faces * self.nside * self.nside

    @property
    def channels(self):
        return self.data.shape[1]

    def angles(self):
        return healpix.pix_to_ang(self.nside, np.arange(self.num_pixels))

    def channel(self, name):
        return self.data[:, self.channel_names.index(name)]


@dataclass
class ImageRaster:
    """Row-major raster, ``data`` of shape ``(height, width, channels)``."""

    data: np.ndarray
    validity: np.ndarray = None
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.size == 0:
            raise ValueError(f"raster data must be a nonempty (height, width, channels) array, got {data.shape}")
        self.data = data
        if self.validity is None:
            self.validity = np.ones(data.shape[:2], dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool).reshape(data.shape[:2])

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def channel(self, name):
        return self.data[:, :, self.channel_names.index(name)]
