"""Time the numba and numpy paths of the surface/distance kernels.

    python3 benchmarks/bench_metrics.py --size 64 --depth 8 --repeat 5

Both paths run in this process on identical inputs; results are checked for
agreement before timings are printed.
"""

import argparse
import time

import numpy as np
from scipy import ndimage

from sifa.metrics import _kernels as K


def blob_volume(rng, depth, size):
    """Smooth random blobs so surfaces look like organ boundaries rather than noise."""
    field = ndimage.gaussian_filter(rng.normal(size=(depth, size, size)), sigma=(1, 4, 4))
    return field > 0.05


def asd_pair(a, b, surface, nearest, check_z):
    sa, sb = surface(a, check_z), surface(b, check_z)
    pa, pb = np.argwhere(sa), np.argwhere(sb)
    sp = np.ones(3)
    return 0.5 * (nearest(pa, sb, sp).mean() + nearest(pb, sa, sp).mean())


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--depth", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    a, b = blob_volume(rng, args.depth, args.size), blob_volume(rng, args.depth, args.size)
    check_z = args.depth > 1
    paths = {
        "numpy": (K.surface_mask_numpy, K.nearest_distances_numpy),
        "numba": (K.surface_mask_numba, K.nearest_distances_numba),
    }
    # warm-up compiles the numba kernels
    cube = np.zeros((3, 4, 4), bool)
    cube[1, 1:3, 1:3] = True
    asd_pair(cube, cube, *paths["numba"], True)

    results = {}
    print(f"volume {args.depth}x{args.size}x{args.size}, best of {args.repeat}")
    print(f"{'path':6s} {'surface ms':>11s} {'asd ms':>9s}")
    for name, (surf, near) in paths.items():
        t_surf, _ = best_of(lambda: surf(a, check_z), args.repeat)
        t_asd, val = best_of(lambda: asd_pair(a, b, surf, near, check_z), args.repeat)
        results[name] = val
        print(f"{name:6s} {1e3 * t_surf:11.3f} {1e3 * t_asd:9.3f}")
    diff = abs(results["numpy"] - results["numba"])
    print(f"ASD numpy={results['numpy']:.6f} numba={results['numba']:.6f} |diff|={diff:.2e}")
    if diff > 1e-9:
        raise SystemExit("paths disagree")


if __name__ == "__main__":
    main()
