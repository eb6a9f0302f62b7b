"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 240x320]

Each kernel runs once untimed per backend (numba compiles or loads its cache
then), followed by ``--repeat`` timed calls; the best time is reported. The
two outputs are also compared so a speedup never hides a divergence.
"""

import argparse
import time

import numpy as np

from monoindoor import kernels, synthetic


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(h, w):
    spec = synthetic.default_box_room_spec(seed=0, n_triplets=1, image_size=(h, w))
    planes = synthetic.scene_planes(spec)
    pose = spec.trajectory[1]
    args = (-pose[:3, :3].T @ pose[:3, 3], pose[:3, :3].T, spec.intrinsics().as_tuple(), planes,
            spec.noise_cell, spec.noise_amp)
    rng = np.random.default_rng(0)
    img = rng.random((h, w, 3))
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(h)), -1) + rng.uniform(-1.5, 1.5, (h, w, 2))
    pred, gt = rng.uniform(0.2, 10, h * w * 8), rng.uniform(0.2, 10, h * w * 8)
    return {
        f"raycast {h}x{w}": lambda b: kernels.raycast_planes(*args, backend=b)[0],
        f"bilinear {h}x{w}x3": lambda b: kernels.bilinear_sample_ref(img, coords, backend=b)[0],
        f"depth stats n={pred.size}": lambda b: kernels.depth_error_stats(pred, gt, backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", default="240x320", help="HxW of the rendered/sampled raster")
    args = ap.parse_args()
    h, w = (int(x) for x in args.size.split("x"))
    print(f"{'kernel':<26} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in cases(h, w).items():
        fast = best_time(lambda: fn("numba"), args.repeat)
        slow = best_time(lambda: fn("numpy"), args.repeat)
        diff = float(np.max(np.abs(fn("numba") - fn("numpy"))))
        print(f"{name:<26} {fast * 1e3:>10.2f} {slow * 1e3:>10.2f} {slow / fast:>7.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
