"""Command-line front end.

Every failure ends with one JSON line on stderr, ``{"error": ..., "message": ...}``,
a nonzero exit status, and no partial outputs left on disk.
"""
import argparse
import json
import math
import os
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import fisheye, healpix, io, metrics
from . import synthetic as syn
from . import train as T
from . import windows as W
from ._accel import set_threads
from .maps import HealpixMap

EXIT_USAGE = 2
EXIT_FAILURE = 1

_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "train", "io"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["nside"],
            "properties": {
                "nside": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 1},
                "window_size": {"type": "integer", "minimum": 1},
                "shift": {"type": "integer", "minimum": 0},
                "shift_strategy": {"enum": ["spiral", "grid"]},
                "depths": _INT_LIST,
                "dims": _INT_LIST,
                "heads": _INT_LIST,
                "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                "num_faces": {"enum": [8]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["task"],
            "properties": {
                "task": {"enum": ["segmentation", "depth"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
                "nside": {"type": "integer", "minimum": 1},
                "num_objects": {"type": "integer", "minimum": 0},
                "num_classes": {"const": syn.NUM_CLASSES},
                "num_faces": {"enum": [8]},
                "camera": {"type": "object"},
            },
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "rasters": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "calib": {"type": "string"},
                "checkpoint": {"type": "string"},
                "loss_curve": {"type": "string"},
                "metrics": {"type": "string"},
                "predictions": {"type": "string"},
            },
        },
    },
}

_INPUT_PATHS = ("samples", "rasters", "calib")


class CliError(Exception):
    """Failure reported to the user; ``kind`` becomes the ``error`` field."""

    def __init__(self, kind, message, status=EXIT_FAILURE, **extra):
        super().__init__(message)
        self.kind = kind
        self.status = status
        self.extra = extra


class Outputs:
    """Paths written by a command, removed again if the command fails."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(Path(path))
        return path

    def cleanup(self):
        for p in reversed(self.paths):
            try:
                if p.is_file():
                    p.unlink()
            except OSError:
                pass


# --- config ----------------------------------------------------------------------------------


def load_run_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError("config", f"config file {path} does not exist", EXIT_USAGE) from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: invalid JSON: {exc}", EXIT_USAGE) from None
    validator = jsonschema.Draft202012Validator(RUN_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = "/" + "/".join(str(p) for p in e.absolute_path)
        raise CliError("config", f"{path}:{loc}: {e.message}", EXIT_USAGE, location=loc)
    base = path.parent
    iocfg = cfg["io"]
    for key, value in list(iocfg.items()):
        if isinstance(value, list):
            iocfg[key] = [str(base / v) for v in value]
        else:
            iocfg[key] = str(base / value)
    for key in _INPUT_PATHS:
        values = iocfg.get(key, [])
        for i, v in enumerate(values if isinstance(values, list) else [values]):
            if not os.path.exists(v):
                loc = f"/io/{key}" + (f"/{i}" if isinstance(values, list) else "")
                raise CliError("config", f"{path}:{loc}: {v} does not exist", EXIT_USAGE, location=loc)
    if "samples" not in iocfg and "data" not in cfg:
        raise CliError("config", f"{path}:/: either io.samples or a data section is required", EXIT_USAGE, location="/")
    train = cfg["train"]
    train.setdefault("lr", T.DEFAULT_LR[train["task"]])
    train.setdefault("steps", 500)
    train.setdefault("seed", 0)
    return cfg


def _samples(cfg):
    if "samples" in cfg["io"]:
        out = []
        for p in cfg["io"]["samples"]:
            m = io.load(p)
            if not isinstance(m, HealpixMap):
                raise CliError("input", f"{p} is not a HEALPix sample map")
            out.append(syn.map_to_sample(m))
        return out
    data = dict(cfg["data"])
    count = data.pop("count", 4)
    first = data.pop("seed", 0)
    data.setdefault("nside", cfg["model"]["nside"])
    return T.make_samples(data, count, first)


def _model(cfg):
    try:
        return T.build_model(cfg["model"], cfg["train"]["task"])
    except ValueError as exc:
        raise CliError("config", f"model: {exc}", EXIT_USAGE, location="/model") from None


def _check_nside(cfg, samples):
    n = cfg["model"]["nside"]
    want = cfg["model"].get("num_faces", 8) * n * n
    for s in samples:
        if s.labels.shape[0] != want:
            raise CliError("input", f"sample has {s.labels.shape[0]} pixels, model expects {want} (nside {n})")


# --- commands ------------------------------------------------------------------------------


def cmd_grid_info(args, out):
    n = args.nside
    try:
        healpix.check_nside(n)
    except ValueError as exc:
        raise CliError("argument", str(exc), EXIT_USAGE) from None
    info = {"nside": n, "npix": healpix.npix(n), "subset_length": 8 * n * n}
    if args.patch is not None or args.window is not None:
        try:
            info["chain"] = W.layer_chain(n, args.patch or 4, args.window or 64, args.stages)
        except ValueError as exc:
            raise CliError("argument", str(exc), EXIT_USAGE) from None
    if args.json:
        print(json.dumps(info, sort_keys=True))
        return
    print(f"nside {n}  npix {info['npix']}  subset_length {info['subset_length']}")
    for row in info.get("chain", []):
        print(
            f"{row['layer']:<9} pixels {row['pixels']:>8}  windows {row['windows']:>6}  "
            f"windows/base {row['windows_per_base_pixel']:>5}  nside {row['nside']:>4}  -> {row['followed_by'] or '-'}"
        )


def cmd_make_plan(args, out):
    try:
        grid = W.build_patches(args.nside, args.patch)
        ws = W.effective_window(grid.nside, args.window)
        part = W.partition_windows(grid, ws)
        plan = W.shift_plan(grid, args.shift, args.strategy)
    except ValueError as exc:
        raise CliError("argument", str(exc), EXIT_USAGE) from None
    io.save_plan(out.add(args.out), plan)
    mask_path = args.mask_out or args.out + ".mask"
    io.save_mask(out.add(mask_path), W.attention_mask(plan, part))
    print(json.dumps({"plan": args.out, "mask": mask_path, "length": plan.length, "masked": plan.masked}, sort_keys=True))


def _camera(args, width):
    if getattr(args, "calib", None):
        try:
            return fisheye.CameraCalibration.load(args.calib)
        except FileNotFoundError:
            raise CliError("input", f"calibration {args.calib} does not exist") from None
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise CliError("input", f"{args.calib}: {exc}") from None
    return fisheye.default_camera(width)


def cmd_gen_data(args, out):
    os.makedirs(args.out, exist_ok=True)
    cam = _camera(args, args.raster_width or 256)
    written = []
    for k in range(args.count):
        seed = args.seed + k
        try:
            spec = syn.SceneSpec(seed=seed, nside=args.nside, num_objects=args.objects, camera=cam)
        except ValueError as exc:
            raise CliError("argument", str(exc), EXIT_USAGE) from None
        path = os.path.join(args.out, f"sample_{seed:05d}.hswm")
        io.save_map(out.add(path), syn.sample_to_map(syn.generate(spec), spec), extra={"scene": spec.to_dict()})
        written.append(path)
        if args.raster_width:
            rpath = os.path.join(args.out, f"sample_{seed:05d}.raster.hswm")
            io.save_raster(out.add(rpath), syn.sample_to_raster(syn.render_fisheye(spec)), extra={"scene": spec.to_dict()})
            written.append(rpath)
    if args.raster_width:
        cpath = os.path.join(args.out, "calib.json")
        io.write_json(out.add(cpath), cam.to_dict())
        written.append(cpath)
    print(json.dumps({"written": written}, sort_keys=True))


def _load_any(path):
    try:
        return io.load(path)
    except FileNotFoundError:
        raise CliError("input", f"{path} does not exist") from None


def cmd_resample(args, out):
    src = _load_any(args.inp)
    if not args.calib:
        raise CliError("argument", "resample needs --calib", EXIT_USAGE)
    cal = _camera(args, 0)
    if isinstance(src, HealpixMap):
        width = args.width or cal.width
        height = args.height or cal.height or width
        if not width:
            raise CliError("argument", "map-to-raster needs --width or a calibration with a raster size", EXIT_USAGE)
        if args.interp != "nearest":
            raise CliError("argument", "map-to-raster supports only --interp nearest", EXIT_USAGE)
        raster, covered = fisheye.resample_to_raster(src, cal, width, height)
        io.save_raster(out.add(args.out), raster)
        print(json.dumps({"coverage": float(covered.mean())}, sort_keys=True))
        return
    if not args.nside:
        raise CliError("argument", "raster-to-map needs --nside", EXIT_USAGE)
    try:
        hmap = fisheye.resample_to_healpix(src, cal, args.nside, args.interp)
    except ValueError as exc:
        raise CliError("argument", str(exc), EXIT_USAGE) from None
    if "label" in hmap.channel_names and args.interp != "nearest":
        k = hmap.channel_names.index("label")
        hmap.data[:, k] = np.rint(hmap.data[:, k])
    io.save_map(out.add(args.out), hmap)
    print(json.dumps({"valid_fraction": float(hmap.validity.mean())}, sort_keys=True))


def cmd_train(args, out):
    cfg = load_run_config(args.config)
    if "checkpoint" not in cfg["io"]:
        raise CliError("config", f"{args.config}:/io: 'checkpoint' is required for train", EXIT_USAGE, location="/io")
    samples = _samples(cfg)
    _check_nside(cfg, samples)
    model = _model(cfg)
    tr = cfg["train"]

    def report(step, loss):
        if args.verbose and (step % 50 == 0 or step == tr["steps"] - 1):
            print(f"step {step:5d}  loss {loss:.6f}", file=sys.stderr)

    curve, target = T.fit(model, samples, tr["task"], tr["steps"], tr["lr"], tr.get("batch"), tr["seed"], report)
    extra = {"task": tr["task"], "run": {k: v for k, v in cfg.items() if k != "io"}}
    if tr["task"] == "depth":
        extra["depth_stats"] = {"mean": target["stats"].mean, "std": target["stats"].std}
    io.save_checkpoint(out.add(cfg["io"]["checkpoint"]), model.state_dict(), model.cfg.to_dict(), extra)
    if "loss_curve" in cfg["io"]:
        io.write_json(out.add(cfg["io"]["loss_curve"]), {"task": tr["task"], "loss": curve})
    trace_path = cfg["io"]["checkpoint"] + ".trace.json"
    model(T.model_inputs(samples[:1]))
    io.write_json(out.add(trace_path), {"layers": model.trace})
    print(json.dumps({"checkpoint": cfg["io"]["checkpoint"], "final_loss": curve[-1] if curve else None}, sort_keys=True))


def _restore(cfg, ckpt):
    try:
        state, mcfg, header = io.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise CliError("input", f"checkpoint {ckpt} does not exist") from None
    task = header.get("extra", {}).get("task", cfg["train"]["task"])
    if task != cfg["train"]["task"]:
        raise CliError("input", f"checkpoint was trained for {task}, config asks for {cfg['train']['task']}")
    from .model import HealSwin, ModelConfig

    model = HealSwin(ModelConfig.from_dict(mcfg))
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CliError("input", str(exc)) from None
    stats = None
    if task == "depth":
        d = header["extra"]["depth_stats"]
        stats = metrics.DepthStats(d["mean"], d["std"])
    return model, stats


def cmd_eval(args, out):
    cfg = load_run_config(args.config)
    samples = _samples(cfg)
    _check_nside(cfg, samples)
    model, stats = _restore(cfg, args.ckpt)
    task = cfg["train"]["task"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        # void stays in the loss but not in the mean
        exclude = (syn.VOID,) if task == "segmentation" else ()
        res, pred = T.evaluate(model, samples, task, stats, exclude=exclude)
        if task == "segmentation":
            res["excluded_classes"] = [syn.CLASS_NAMES[c] for c in exclude]
            if "rasters" in cfg["io"]:
                res["flat"] = _flat_eval(cfg, model, pred, exclude)
    res["warnings"] = sorted({str(w.message) for w in caught})
    res["task"] = task
    res["num_samples"] = len(samples)
    text = json.dumps(_jsonable(res), sort_keys=True, indent=2)
    if "metrics" in cfg["io"]:
        with io.atomic_output(out.add(cfg["io"]["metrics"]), "w") as fh:
            fh.write(text + "\n")
    print(text)


def _flat_eval(cfg, model, pred, exclude=()):
    rasters = cfg["io"]["rasters"]
    if len(rasters) != pred.shape[0]:
        raise CliError("config", f"{len(rasters)} rasters for {pred.shape[0]} samples", EXIT_USAGE, location="/io/rasters")
    if "calib" not in cfg["io"]:
        raise CliError("config", "flat evaluation needs io.calib", EXIT_USAGE, location="/io")
    cal = fisheye.CameraCalibration.load(cfg["io"]["calib"])
    n = model.cfg.out_channels
    cms = np.zeros((n, n), dtype=np.int64)
    for b, rpath in enumerate(rasters):
        r = syn.raster_to_sample(io.load(rpath))
        hmap = HealpixMap(model.cfg.nside, pred[b].astype(np.float32), None, model.cfg.num_faces)
        proj, covered = fisheye.resample_to_raster(hmap, cal, r.labels.shape[1], r.labels.shape[0])
        keep = covered & r.valid
        cms += metrics.confusion_matrix(proj.data[..., 0].round().astype(np.int64), r.labels, n, keep)
    return metrics.iou_from_confusion(cms, exclude)


def cmd_predict(args, out):
    cfg = load_run_config(args.config)
    samples = _samples(cfg)
    _check_nside(cfg, samples)
    model, stats = _restore(cfg, args.ckpt)
    dest = args.out or cfg["io"].get("predictions")
    if not dest:
        raise CliError("argument", "predict needs --out or io.predictions", EXIT_USAGE)
    os.makedirs(dest, exist_ok=True)
    raw = T.predict(model, samples)
    written = []
    for b in range(raw.shape[0]):
        if cfg["train"]["task"] == "segmentation":
            data = np.concatenate([raw[b].argmax(axis=-1)[:, None], raw[b]], axis=1)
            names = ["label"] + [f"logit_{c}" for c in range(raw.shape[-1])]
        else:
            data = stats.destandardize(raw[b])
            names = ["depth"]
        path = os.path.join(dest, f"pred_{b:05d}.hswm")
        io.save_map(out.add(path), HealpixMap(model.cfg.nside, data.astype(np.float32), samples[b].valid, model.cfg.num_faces, names))
        written.append(path)
    print(json.dumps({"written": written}, sort_keys=True))


# --- plot ----------------------------------------------------------------------------------


_PALETTE = np.array(
    [[0, 0, 0], [128, 64, 128], [70, 130, 180], [220, 20, 60], [0, 142, 0], [250, 170, 30], [190, 153, 153], [255, 255, 255]],
    dtype=np.float64,
) / 255.0


def _colorize(hmap, channel):
    names = hmap.channel_names
    if channel is None:
        if {"r", "g", "b"} <= set(names):
            channel = "rgb"
        elif "label" in names:
            channel = "label"
        else:
            channel = names[0] if names else 0
    if channel == "rgb":
        rgb = np.stack([hmap.channel(c) for c in "rgb"], axis=1).astype(np.float64)
    else:
        if isinstance(channel, str) and channel not in names:
            raise CliError("argument", f"map has no channel {channel!r}; channels are {names}", EXIT_USAGE)
        v = hmap.channel(channel) if isinstance(channel, str) else hmap.data[:, channel]
        v = v.astype(np.float64)
        if channel == "label":
            rgb = _PALETTE[np.clip(np.rint(v).astype(np.int64), 0, len(_PALETTE) - 1)]
        else:
            ok = hmap.validity & np.isfinite(v)
            lo, hi = (v[ok].min(), v[ok].max()) if ok.any() else (0.0, 1.0)
            g = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
            rgb = np.repeat(g[:, None], 3, axis=1)
    rgb = np.where(hmap.validity[:, None], rgb, 0.0)
    return rgb


def face_montage(rgb, nside, num_faces=8):
    """2 x 4 tiles of ``nside x nside``; face ``f`` at column ``f % 4``, row ``f // 4``."""
    img = np.zeros((2 * nside, 4 * nside, 3))
    pix = np.arange(num_faces * nside * nside)
    f, x, y = healpix.local_xy(nside, pix)
    # local x grows toward the image right, local y upward
    col = (f % 4) * nside + x
    row = (f // 4) * nside + (nside - 1 - y)
    img[row, col] = rgb
    return img


def cmd_plot(args, out):
    hmap = _load_any(args.inp)
    if not isinstance(hmap, HealpixMap):
        raise CliError("input", f"{args.inp} is not a HEALPix map")
    rgb = _colorize(hmap, args.channel)
    img = face_montage(rgb, hmap.nside, hmap.num_faces)
    scale = max(1, args.scale)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    io.write_ppm(out.add(args.out), img)
    if args.fisheye:
        cal = _camera(args, args.width)
        width = args.width or cal.width or 256
        height = cal.height or width
        colored = HealpixMap(hmap.nside, rgb.astype(np.float32), hmap.validity, hmap.num_faces, ["r", "g", "b"])
        raster, _ = fisheye.resample_to_raster(colored, cal, width, height)
        io.write_ppm(out.add(args.fisheye), np.where(raster.validity[..., None], raster.data, 0.0))


# --- entry point ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", EXIT_USAGE)


def build_parser():
    p = _Parser(prog="healswin", description="HEALPix window-attention tools for fisheye data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("grid-info", help="pixel counts and the layer-size chain")
    g.add_argument("--nside", type=int, required=True)
    g.add_argument("--patch", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--stages", type=int, default=4)
    g.add_argument("--json", action="store_true")
    g.set_defaults(fn=cmd_grid_info)

    m = sub.add_parser("make-plan", help="write a shift plan and its mask sidecar")
    m.add_argument("--nside", type=int, required=True)
    m.add_argument("--patch", type=int, default=4)
    m.add_argument("--window", type=int, default=64)
    m.add_argument("--shift", type=int, default=4)
    m.add_argument("--strategy", choices=("spiral", "grid"), default="spiral")
    m.add_argument("--out", required=True)
    m.add_argument("--mask-out")
    m.set_defaults(fn=cmd_make_plan)

    d = sub.add_parser("gen-data", help="write synthetic samples")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--count", type=int, default=4)
    d.add_argument("--nside", type=int, default=16)
    d.add_argument("--objects", type=int, default=4)
    d.add_argument("--raster-width", type=int, default=0, help="also render fisheye rasters of this width")
    d.add_argument("--calib")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("resample", help="raster to HEALPix map or back")
    r.add_argument("--calib", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--interp", choices=("bilinear", "nearest"), default="bilinear")
    r.add_argument("--nside", type=int)
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int)
    r.set_defaults(fn=cmd_resample)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("predict", help="write prediction maps")
    q.add_argument("--config", required=True)
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out")
    q.set_defaults(fn=cmd_predict)

    pl = sub.add_parser("plot", help="render a map as a face montage")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--channel")
    pl.add_argument("--scale", type=int, default=4)
    pl.add_argument("--fisheye", help="also write a fisheye back-projection here")
    pl.add_argument("--calib")
    pl.add_argument("--width", type=int, default=0)
    pl.set_defaults(fn=cmd_plot)
    return p


def _threads_from_env():
    raw = os.environ.get("HEALSWIN_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise CliError("environment", f"HEALSWIN_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None
    if n < 1:
        raise CliError("environment", f"HEALSWIN_THREADS must be positive, got {n}", EXIT_USAGE)
    set_threads(n)


def main(argv=None):
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        _threads_from_env()
        args.fn(args, out)
        return 0
    except CliError as exc:
        out.cleanup()
        _report(exc.kind, str(exc), **exc.extra)
        return exc.status
    except (io.FormatError, ValueError, OSError) as exc:
        out.cleanup()
        _report(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    except KeyboardInterrupt:
        out.cleanup()
        _report("interrupted", "interrupted")
        return 130
    except Exception as exc:  # noqa: BLE001 - last resort, still one line
        out.cleanup()
        _report("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_FAILURE


def _report(kind, message, **extra):
    msg = {"error": kind, "message": " ".join(str(message).split())}
    msg.update(extra)
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
