"""Procedural street-like scenes seen from a fisheye camera.

Camera frame: x right, y down, z along the optical axis (theta = 0). The
scene is analytic, so it can be evaluated on HEALPix pixel centers and on
back-projected raster pixels alike:

* ground plane ``y = height`` below the camera (road, void beyond 50 m),
* sky wherever a ray points at or above the horizon,
* spherical-cap objects at fixed depth that occlude what lies behind them,
* an ego-vehicle cap around the straight-down direction.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import fisheye, healpix
from .maps import HealpixMap, ImageRaster

CLASS_NAMES = ("void", "road", "sky", "object-a", "object-b", "ego")
VOID, ROAD, SKY, OBJECT_A, OBJECT_B, EGO = range(6)
NUM_CLASSES = len(CLASS_NAMES)

DEPTH_MIN = 0.5
DEPTH_MAX = 100.0
FAR_GROUND = 50.0
EGO_RADIUS = math.radians(28.0)
EGO_HOOD = 0.6

CHANNELS = ["r", "g", "b", "label", "depth", "sky"]

_BASE_COLORS = np.array(
    [
        [0.10, 0.10, 0.10],
        [0.35, 0.35, 0.38],
        [0.55, 0.75, 0.95],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.90, 0.85, 0.20],
    ]
)


@dataclass
class SceneSpec:
    seed: int = 0
    nside: int = 16
    num_objects: int = 4
    num_classes: int = NUM_CLASSES
    camera: fisheye.CameraCalibration = field(default_factory=lambda: fisheye.default_camera(256))
    num_faces: int = 8

    def __post_init__(self):
        healpix.check_nside(self.nside)
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"the synthetic scene has exactly {NUM_CLASSES} classes")
        if self.num_objects < 0:
            raise ValueError("num_objects must be nonnegative")

    def to_dict(self):
        return {
            "seed": self.seed,
            "nside": self.nside,
            "num_objects": self.num_objects,
            "num_classes": self.num_classes,
            "camera": self.camera.to_dict(),
            "num_faces": self.num_faces,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = fisheye.CameraCalibration.from_dict(d["camera"])
        return cls(**d)


@dataclass
class Sample:
    """Aligned image (n, 3), labels, depth in meters, sky flags and validity."""

    image: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    sky: np.ndarray
    valid: np.ndarray

    def stacked(self):
        return np.concatenate(
            [self.image, self.labels[..., None], self.depth[..., None], self.sky[..., None]], axis=-1
        ).astype(np.float32)

    @property
    def depth_valid(self):
        return self.valid & ~self.sky


class Scene:
    """The analytic scene drawn from a seed."""

    def __init__(self, seed, num_objects=4):
        rng = np.random.default_rng(seed)
        self.height = rng.uniform(1.2, 1.8)
        polar = rng.uniform(math.radians(15), math.radians(70), num_objects)
        azim = rng.uniform(0.0, 2 * math.pi, num_objects)
        self.centers = healpix.ang_to_vec(polar, azim).reshape(num_objects, 3)
        self.radii = rng.uniform(math.radians(8), math.radians(16), num_objects)
        self.depths = rng.uniform(3.0, 25.0, num_objects)
        self.classes = np.array([OBJECT_A + k % 2 for k in range(num_objects)], dtype=np.int64)
        self.freqs = rng.normal(0.0, 4.0, (4, 3))
        self.phases = rng.uniform(0.0, 2 * math.pi, 4)
        self.tints = rng.uniform(-0.05, 0.05, (NUM_CLASSES, 3))

    def evaluate(self, d):
        """Labels, depths, sky flags and colors for unit direction vectors ``d`` (n, 3)."""
        d = np.asarray(d, dtype=np.float64)
        down = d[:, 1]
        n = d.shape[0]
        labels = np.full(n, SKY, dtype=np.int64)
        depth = np.full(n, np.inf)
        ground = down > 0.0
        t = np.where(ground, self.height / np.where(ground, down, 1.0), np.inf)
        labels[ground] = np.where(t[ground] > FAR_GROUND, VOID, ROAD)
        depth[ground] = t[ground]

        for c, rad, dist, cls in zip(self.centers, self.radii, self.depths, self.classes):
            inside = (d @ c > math.cos(rad)) & (dist < depth)
            labels[inside] = cls
            depth[inside] = dist

        ego = down > math.cos(EGO_RADIUS)
        labels[ego] = EGO
        depth[ego] = EGO_HOOD / down[ego]

        sky = labels == SKY
        depth = np.where(sky, 0.0, np.clip(depth, DEPTH_MIN, DEPTH_MAX))
        texture = np.sin(d @ self.freqs.T + self.phases).mean(axis=1)
        rgb = _BASE_COLORS[labels] + self.tints[labels] + 0.08 * texture[:, None]
        return labels, depth, sky, np.clip(rgb, 0.0, 1.0)


def generate(spec):
    """The scene on the centers of the subset's HEALPix pixels."""
    scene = Scene(spec.seed, spec.num_objects)
    n = spec.num_faces * spec.nside * spec.nside
    theta, phi = healpix.pix_to_ang(spec.nside, np.arange(n))
    labels, depth, sky, rgb = scene.evaluate(healpix.ang_to_vec(theta, phi))
    return Sample(rgb.astype(np.float32), labels, depth.astype(np.float32), sky, np.ones(n, dtype=bool))


def render_fisheye(spec):
    """The scene seen through ``spec.camera``; pixels beyond the lens are invalid."""
    scene = Scene(spec.seed, spec.num_objects)
    cam = spec.camera
    theta, phi, valid = fisheye.raster_angles(cam)
    labels, depth, sky, rgb = scene.evaluate(healpix.ang_to_vec(theta.ravel(), phi.ravel()))
    shape = (cam.height, cam.width)
    valid = valid.reshape(shape)
    sample = Sample(
        rgb.reshape(shape + (3,)).astype(np.float32),
        labels.reshape(shape),
        depth.reshape(shape).astype(np.float32),
        sky.reshape(shape),
        valid,
    )
    for a in (sample.image, sample.labels, sample.depth, sample.sky):
        a[~valid] = 0
    return sample


def stable_label_mask(spec, nside, band=1.0, num_dirs=8):
    """HEALPix pixels whose label does not change within ``band`` pixel-angles of the center."""
    scene = Scene(spec.seed, spec.num_objects)
    n = spec.num_faces * nside * nside
    theta, phi = healpix.pix_to_ang(nside, np.arange(n))
    center = healpix.ang_to_vec(theta, phi)
    ref = scene.evaluate(center)[0]
    radius = band * math.sqrt(4 * math.pi / (12 * nside * nside))
    # orthonormal tangent frame at each center
    e_theta = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=1)
    e_phi = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
    stable = np.ones(n, dtype=bool)
    for frac in (0.5, 1.0):
        for k in range(num_dirs):
            a = 2 * math.pi * k / num_dirs
            offset = frac * radius * (math.cos(a) * e_theta + math.sin(a) * e_phi)
            d = center * math.cos(frac * radius) + offset * (math.sin(frac * radius) / (frac * radius))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            stable &= scene.evaluate(d)[0] == ref
    return stable


# --- conversions to the on-disk containers ------------------------------------------------


def sample_to_map(sample, spec):
    return HealpixMap(spec.nside, sample.stacked(), sample.valid, spec.num_faces, list(CHANNELS))


def sample_to_raster(sample):
    return ImageRaster(sample.stacked(), sample.valid, list(CHANNELS))


def _from_stacked(data, valid):
    return Sample(
        np.ascontiguousarray(data[..., 0:3]),
        np.rint(data[..., 3]).astype(np.int64),
        np.ascontiguousarray(data[..., 4]),
        data[..., 5] > 0.5,
        np.asarray(valid, dtype=bool),
    )


def map_to_sample(hmap):
    if list(hmap.channel_names) != CHANNELS:
        raise ValueError(f"map channels {hmap.channel_names} are not a sample layout {CHANNELS}")
    return _from_stacked(hmap.data, hmap.validity)


def raster_to_sample(raster):
    if list(raster.channel_names) != CHANNELS:
        raise ValueError(f"raster channels {raster.channel_names} are not a sample layout {CHANNELS}")
    return _from_stacked(raster.data, raster.validity)
