"""Training, evaluation and prediction loops over synthetic samples."""
import numpy as np

from . import autodiff as ad
from . import healpix, metrics
from . import synthetic as syn
from .model import HealSwin, ModelConfig

TASKS = ("segmentation", "depth")
DEFAULT_LR = {"segmentation": 9.4e-4, "depth": 1e-3}


def model_inputs(samples):
    """Zero-centered RGB stacked into ``(batch, pixels, 3)``."""
    return np.stack([s.image for s in samples]).astype(np.float64) - 0.5


def _dataset(samples, task, num_classes):
    x = model_inputs(samples)
    valid = np.stack([s.valid for s in samples])
    if task == "segmentation":
        labels = np.stack([s.labels for s in samples])
        counts = metrics.class_counts(labels, num_classes, valid)
        return x, {"labels": labels, "valid": valid, "weights": metrics.class_weights(counts)}
    depth = np.stack([s.depth for s in samples])
    sky = np.stack([s.sky for s in samples])
    stats = metrics.DepthStats.from_depths(depth, valid & ~sky)
    return x, {"depth": depth, "sky": sky, "valid": valid, "stats": stats}


def loss_fn(out, target, task):
    if task == "segmentation":
        return metrics.weighted_cross_entropy(out, target["labels"], target["weights"], target["valid"])
    return metrics.depth_l2_loss(out.reshape(*out.shape[:-1]), target["depth"], target["sky"], target["stats"], target["valid"])


def fit(model, samples, task, steps, lr, batch=None, seed=0, callback=None):
    """Full-batch (or seeded mini-batch) AdamW; returns the per-step loss curve and the target statistics."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    x, target = _dataset(samples, task, model.cfg.out_channels)
    n = x.shape[0]
    batch = n if batch is None else min(batch, n)
    opt = ad.AdamW(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(steps):
        idx = np.arange(n) if batch == n else np.sort(rng.choice(n, batch, replace=False))
        sub = {k: (v[idx] if isinstance(v, np.ndarray) and v.shape[:1] == (n,) else v) for k, v in target.items()}
        opt.zero_grad()
        loss = loss_fn(model(x[idx]), sub, task)
        loss.backward()
        opt.step()
        curve.append(float(loss.item()))
        if callback is not None:
            callback(step, curve[-1])
    return curve, target


def predict(model, samples, batch=4):
    x = model_inputs(samples)
    outs = [model(x[i : i + batch]).data for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs, axis=0)


def evaluate(model, samples, task, stats=None, nside=None, exclude=()):
    """Metrics of ``model`` on ``samples``; ``stats`` destandardizes depth predictions."""
    out = predict(model, samples)
    valid = np.stack([s.valid for s in samples])
    if task == "segmentation":
        pred = out.argmax(axis=-1)
        gt = np.stack([s.labels for s in samples])
        res = metrics.spherical_miou(pred, gt, model.cfg.out_channels, valid, exclude)
        res["pixel_accuracy"] = metrics.pixel_accuracy(pred, gt, valid)
        return res, pred
    if stats is None:
        raise ValueError("depth evaluation needs depth statistics")
    depth = np.stack([s.depth for s in samples])
    sky = np.stack([s.sky for s in samples])
    keep = valid & ~sky
    z = out[..., 0]
    mse = float(np.mean((z[keep] - stats.standardize(depth[keep])) ** 2))
    pred_m = stats.destandardize(z)
    nside = nside or model.cfg.nside
    theta, phi = healpix.pix_to_ang(nside, np.arange(z.shape[1]))
    chamfers, clamped = [], 0
    for b in range(z.shape[0]):
        P, c = metrics.depth_to_pointcloud(pred_m[b], theta, phi, keep[b], return_clamped=True)
        Q = metrics.depth_to_pointcloud(depth[b], theta, phi, keep[b])
        clamped += c
        chamfers.append(metrics.chamfer(P, Q))
    res = {"standardized_mse": mse, "chamfer": float(np.mean(chamfers)), "chamfer_per_sample": chamfers, "clamped_depths": clamped}
    return res, pred_m


def make_samples(data_cfg, count, first_seed):
    out = []
    for k in range(count):
        d = dict(data_cfg)
        d["seed"] = first_seed + k
        out.append(syn.generate(syn.SceneSpec.from_dict(d)))
    return out


def build_model(model_cfg, task):
    d = dict(model_cfg)
    d["out_channels"] = syn.NUM_CLASSES if task == "segmentation" else 1
    d.setdefault("in_channels", 3)
    return HealSwin(ModelConfig.from_dict(d))
