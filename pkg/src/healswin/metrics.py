"""Losses and evaluation metrics for segmentation and depth on the sphere."""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._accel import NUMBA_ENABLED, njit, prange


class MetricError(ValueError):
    pass


# --- segmentation --------------------------------------------------------------------


def class_weights(counts):
    """``counts ** (-1/4)`` for classes that occur, 0 for classes that never do."""
    counts = np.asarray(counts, dtype=np.float64)
    w = np.zeros_like(counts)
    present = counts > 0
    w[present] = counts[present] ** -0.25
    return w


def class_counts(labels, num_classes, valid=None):
    labels = np.asarray(labels).astype(np.int64).ravel()
    if valid is not None:
        labels = labels[np.asarray(valid, dtype=bool).ravel()]
    return np.bincount(labels, minlength=num_classes)[:num_classes]


def weighted_cross_entropy(logits, labels, weights, valid=None):
    """Mean over valid pixels of ``weights[label] * -log softmax(logits)[label]``."""
    C = logits.shape[-1]
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ad.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if np.any((labels[valid] < 0) | (labels[valid] >= C)):
        raise MetricError(f"labels must lie in [0, {C})")
    count = int(valid.sum())
    if count == 0:
        raise MetricError("no valid pixels")
    weights = np.asarray(weights, dtype=np.float64)
    safe = np.where(valid, labels, 0)
    coef = np.where(valid, weights[safe], 0.0) / count
    target = np.zeros(logits.shape)
    np.put_along_axis(target, safe[..., None], coef[..., None], axis=-1)
    return -(ad.log_softmax(logits) * target).sum()


def confusion_matrix(pred, gt, num_classes, valid=None):
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        pred, gt = pred[keep], gt[keep]
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise MetricError(f"{name} labels must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm, exclude=()):
    """Per-class IoU (None for classes absent from both) and the mean over kept classes."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = {}
    kept = []
    absent = []
    for c in range(cm.shape[0]):
        if denom[c] == 0:
            per_class[c] = None
            if c not in exclude:
                absent.append(c)
            continue
        per_class[c] = float(tp[c] / denom[c])
        if c not in exclude:
            kept.append(per_class[c])
    if absent:
        warnings.warn(f"classes {absent} absent from prediction and ground truth; left out of the mean", stacklevel=3)
    miou = float(np.mean(kept)) if kept else float("nan")
    return {"per_class_iou": per_class, "miou": miou}


def _labels(x):
    data = getattr(x, "data", x)
    data = np.asarray(data)
    if data.ndim == 2 and data.shape[1] == 1:
        data = data[:, 0]
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    return np.rint(data).astype(np.int64)


def spherical_miou(pred, gt, num_classes, valid=None, exclude=()):
    """mIoU over map pixels; ``pred``/``gt`` are label arrays or single-channel maps."""
    if valid is None:
        valid = getattr(gt, "validity", None)
    cm = confusion_matrix(_labels(pred), _labels(gt), num_classes, valid)
    return iou_from_confusion(cm, exclude)


def flat_miou(pred, gt, coverage, num_classes, exclude=()):
    """mIoU over the raster pixels flagged in ``coverage``."""
    coverage = np.asarray(coverage, dtype=bool)
    if not coverage.any():
        raise MetricError("coverage mask is empty")
    cm = confusion_matrix(_labels(pred), _labels(gt), num_classes, coverage)
    return iou_from_confusion(cm, exclude)


def pixel_accuracy(pred, gt, valid=None):
    pred, gt = _labels(pred).ravel(), _labels(gt).ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        pred, gt = pred[keep], gt[keep]
    return float(np.mean(pred == gt))


# --- depth ------------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise MetricError("depth std must be positive")

    @classmethod
    def from_depths(cls, depths, masks):
        """Statistics over the masked entries of the training depth maps."""
        vals = np.concatenate([np.asarray(d, dtype=np.float64).ravel()[np.asarray(m, dtype=bool).ravel()] for d, m in zip(depths, masks)])
        if vals.size == 0:
            raise MetricError("no depth values to standardize")
        return cls(float(vals.mean()), float(vals.std()))

    def standardize(self, depth):
        return (np.asarray(depth, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def depth_l2_loss(pred, gt, sky_mask, stats, valid=None):
    """MSE in standardized units over pixels that are neither sky nor invalid.

    ``pred`` is a standardized prediction tensor; ``gt`` is in meters.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if tuple(pred.shape) != gt.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = ~np.asarray(sky_mask, dtype=bool)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise MetricError("no valid non-sky pixels")
    target = np.where(keep, stats.standardize(np.where(keep, gt, stats.mean)), 0.0)
    diff = ad.masked_fill(pred - target, ~keep, 0.0)
    return (diff * diff).sum() * (1.0 / count)


def depth_to_pointcloud(depth, theta, phi, valid=None, return_clamped=False):
    """Scale unit direction vectors by depth; negative depths are clamped to zero."""
    depth = np.asarray(depth, dtype=np.float64).ravel()
    theta = np.asarray(theta, dtype=np.float64).ravel()
    phi = np.asarray(phi, dtype=np.float64).ravel()
    keep = np.ones(depth.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).ravel()
    d = depth[keep]
    clamped = int(np.count_nonzero(d < 0))
    d = np.maximum(d, 0.0)
    st = np.sin(theta[keep])
    pts = d[:, None] * np.stack([st * np.cos(phi[keep]), st * np.sin(phi[keep]), np.cos(theta[keep])], axis=1)
    return (pts, clamped) if return_clamped else pts


# --- chamfer ------------------------------------------------------------------------------


def _check_cloud(P, name):
    P = np.ascontiguousarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise MetricError(f"{name} must have shape (n, 3), got {P.shape}")
    if P.shape[0] == 0:
        raise MetricError(f"{name} is empty")
    if not np.isfinite(P).all():
        raise MetricError(f"{name} has non-finite coordinates")
    return P


def nn_sqdist_brute(P, Q, chunk=512):
    """Squared distance from each point of P to its nearest point of Q, O(|P| |Q|)."""
    out = np.empty(P.shape[0])
    qx, qy, qz = (np.ascontiguousarray(Q[:, i]) for i in range(3))
    for s in range(0, P.shape[0], chunk):
        p = P[s:s + chunk]
        dx = p[:, 0:1] - qx
        d = dx * dx
        dy = p[:, 1:2] - qy
        d += dy * dy
        dz = p[:, 2:3] - qz
        d += dz * dz
        out[s:s + chunk] = d.min(axis=1)
    return out


def _grid_layout(Q, target_per_cell=2.0, max_cells=1 << 24):
    lo = Q.min(axis=0)
    ext = np.maximum(Q.max(axis=0) - lo, 1e-12)
    target = min(max(Q.shape[0] / target_per_cell, 1.0), max_cells)
    cell = float(ext.max() / target ** (1.0 / 3.0))
    while True:
        dims = np.floor(ext / cell).astype(np.int64) + 1
        if dims.prod() <= max(target, 1) * 8:
            return lo, cell, dims
        cell *= 1.25


@njit
def _build_grid(Q, lo, cell, dims):
    n = Q.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    cid = np.empty(n, dtype=np.int64)
    for i in range(n):
        c0 = min(max(int((Q[i, 0] - lo[0]) / cell), 0), dims[0] - 1)
        c1 = min(max(int((Q[i, 1] - lo[1]) / cell), 0), dims[1] - 1)
        c2 = min(max(int((Q[i, 2] - lo[2]) / cell), 0), dims[2] - 1)
        cid[i] = (c0 * dims[1] + c1) * dims[2] + c2
    starts = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        starts[cid[i] + 1] += 1
    for c in range(ncell):
        starts[c + 1] += starts[c]
    fill = starts[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        order[fill[cid[i]]] = i
        fill[cid[i]] += 1
    return starts, order


@njit(parallel=True)
def _nn_grid_kernel(P, Q, lo, cell, dims, starts, order):
    m = P.shape[0]
    out = np.empty(m)
    kmax = max(dims[0], max(dims[1], dims[2]))
    for i in prange(m):
        px = P[i, 0]
        py = P[i, 1]
        pz = P[i, 2]
        c0 = min(max(int(math.floor((px - lo[0]) / cell)), 0), dims[0] - 1)
        c1 = min(max(int(math.floor((py - lo[1]) / cell)), 0), dims[1] - 1)
        c2 = min(max(int(math.floor((pz - lo[2]) / cell)), 0), dims[2] - 1)
        best = np.inf
        k = 0
        while True:
            for a in range(max(c0 - k, 0), min(c0 + k, dims[0] - 1) + 1):
                for b in range(max(c1 - k, 0), min(c1 + k, dims[1] - 1) + 1):
                    for c in range(max(c2 - k, 0), min(c2 + k, dims[2] - 1) + 1):
                        if max(abs(a - c0), max(abs(b - c1), abs(c - c2))) != k:
                            continue
                        cidx = (a * dims[1] + b) * dims[2] + c
                        for s in range(starts[cidx], starts[cidx + 1]):
                            j = order[s]
                            dx = px - Q[j, 0]
                            dy = py - Q[j, 1]
                            dz = pz - Q[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best:
                                best = d
            # unvisited cells are at least k cell widths away
            reach = k * cell
            if best <= reach * reach or k >= kmax:
                break
            k += 1
        out[i] = best
    return out


def nn_sqdist_grid(P, Q):
    """Same result as :func:`nn_sqdist_brute` through a uniform spatial hash grid on Q."""
    lo, cell, dims = _grid_layout(Q)
    starts, order = _build_grid(Q, lo, cell, dims)
    return _nn_grid_kernel(P, Q, lo, cell, dims, starts, order)


def chamfer(P, Q, method="auto"):
    """Mean squared nearest-neighbour distance from P to Q plus from Q to P."""
    P = _check_cloud(P, "first cloud")
    Q = _check_cloud(Q, "second cloud")
    if method == "auto":
        method = "grid" if NUMBA_ENABLED else "brute"
    if method == "grid":
        nn = nn_sqdist_grid
    elif method == "brute":
        nn = nn_sqdist_brute
    else:
        raise ValueError(f"unknown chamfer method {method!r}")
    return float(np.mean(nn(P, Q)) + np.mean(nn(Q, P)))
