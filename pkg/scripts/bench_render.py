"""Render throughput versus primitive count, with and without the BVH.

    python3 scripts/bench_render.py --res 256 --grids 4 8 16 32
"""

import argparse
import time

import numpy as np

from voxprim.render import MarchConfig, prepare_scene, render
from voxprim.camera import ring_cameras
from voxprim.synth import make_synthetic_subject


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--grids", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--payload", type=int, default=4)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--skip-brute", action="store_true")
    args = p.parse_args()
    cam = ring_cameras(1, args.res)[0]
    print(f"{'K':>6} {'bvh ms':>10} {'brute ms':>10} {'speedup':>8}")
    for W in args.grids:
        s = make_synthetic_subject(W=W, S=args.payload, n_views=1, resolution=8).gt_set
        cfg = MarchConfig.for_set(s)
        scene = prepare_scene(s)
        t_bvh = best_of(lambda: render(s, cam, cfg, scene=scene), args.repeat)
        t_brute = np.nan if args.skip_brute else best_of(
            lambda: render(s, cam, cfg, scene=scene, use_bvh=False), args.repeat)
        print(f"{s.K:>6} {1000 * t_bvh:>10.1f} {1000 * t_brute:>10.1f} {t_brute / t_bvh:>8.1f}")


if __name__ == "__main__":
    main()
