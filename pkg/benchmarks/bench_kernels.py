"""Time the compiled and numpy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from lidarvq import kernels, scenes


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    rng = np.random.default_rng(0)
    beams = scenes.densify_beams(scenes.BeamConfig(), 4)
    dirs = scenes._ray_directions(beams.elevation_angles(), beams.azimuth_steps)
    scene = scenes.random_scene(scenes.derive_seed(0, 0))
    centers = np.array([b.center for b in scene.boxes])
    half = np.array([b.half_extents for b in scene.boxes])
    yaw = np.array([b.yaw for b in scene.boxes])
    z = rng.normal(size=(512, 64)).astype(np.float32)
    codes = rng.normal(size=(128, 64)).astype(np.float32)
    pts = rng.uniform([0, -25.6, -2.4], [51.2, 25.6, 2.4], size=(8192, 3))
    return {
        "raycast_ranges (8192 rays)": lambda b: b.raycast_ranges(
            dirs, scene.ground_z0, scene.ground_slope, centers, half, np.cos(yaw), np.sin(yaw), beams.max_range),
        "nearest_codes (512 x 128 x 64)": lambda b: b.nearest_codes(
            z.astype(np.float64), codes.astype(np.float64)),
        "voxel_occupancy (8192 points)": lambda b: b.voxel_occupancy(
            pts, 0.0, -25.6, -2.4, 0.4, 0.4, 0.3, 128, 128, 16),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = kernels.available_backends()
    print(f"backends: {', '.join(names)} (active: {kernels.BACKEND})")
    for label, fn in cases().items():
        times = {n: _best(lambda: fn(kernels.get_backend(n)), args.repeat) for n in names}
        row = "  ".join(f"{n} {1e3 * t:8.3f} ms" for n, t in times.items())
        speedup = ""
        if "cython" in times:
            speedup = f"  speedup x{times['python'] / times['cython']:.1f}"
        print(f"{label:34s} {row}{speedup}")


if __name__ == "__main__":
    main()
