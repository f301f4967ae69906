"""Time the hot kernels with numba and with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each mode runs in its own interpreter because HEALSWIN_NUMBA is read at import.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm up, includes compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(repeat):
    from healswin import _accel, fisheye, healpix, metrics
    from healswin.maps import ImageRaster

    rng = np.random.default_rng(0)
    nside = 256
    pix = np.arange(healpix.npix(nside))
    theta = np.arccos(rng.uniform(-1, 1, pix.size))
    phi = rng.uniform(0, 2 * np.pi, pix.size)
    cam = fisheye.default_camera(512)
    img = ImageRaster(rng.random((512, 512, 3)).astype(np.float32))
    P = rng.standard_normal((20000, 3))
    Q = rng.standard_normal((20000, 3)) + 0.1

    cases = {
        "nest_to_ring nside=256": lambda: healpix.nest_to_ring(nside, pix),
        "ring_to_nest nside=256": lambda: healpix.ring_to_nest(nside, pix),
        "pix_to_ang nside=256": lambda: healpix.pix_to_ang(nside, pix),
        "ang_to_pix 786k angles": lambda: healpix.ang_to_pix(nside, theta, phi),
        "bilinear 512px -> nside=128": lambda: fisheye.resample_to_healpix(img, cam, 128, "bilinear"),
        "nearest 512px -> nside=128": lambda: fisheye.resample_to_healpix(img, cam, 128, "nearest"),
        "chamfer 2x20k points": lambda: metrics.chamfer(P, Q),
    }
    out = {name: _best(fn, repeat) for name, fn in cases.items()}
    print(json.dumps({"numba": _accel.NUMBA_ENABLED, "seconds": out}))


def run_mode(flag, repeat):
    env = dict(os.environ, HEALSWIN_NUMBA=flag)
    proc = subprocess.run(
        [sys.executable, __file__, "--worker", "--repeat", str(repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    fast = run_mode("1", args.repeat)
    slow = run_mode("0", args.repeat)
    if not fast["numba"]:
        print("numba is not importable; both columns use numpy", file=sys.stderr)
    print(f"{'kernel':<30} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, t in fast["seconds"].items():
        s = slow["seconds"][name]
        print(f"{name:<30} {t * 1e3:>10.2f} {s * 1e3:>10.2f} {s / t:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast["seconds"], "numpy": slow["seconds"]}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
