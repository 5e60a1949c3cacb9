"""Fit a synthetic subject from scratch and score held-out views.

    python3 scripts/fit_round_trip.py --out runs/fit --iters 1500
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from voxprim import MarchConfig, render
from voxprim.fitting import FitConfig, fit_subject, psnr
from voxprim.io import save_png, save_primitive_set
from voxprim.synth import held_out_cameras, make_synthetic_subject


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/fit")
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--payload", type=int, default=4)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--held-out", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    subj = make_synthetic_subject(seed=args.seed, W=args.grid, S=args.payload, n_views=args.views,
                                  resolution=args.res)
    cfg = FitConfig(iterations=args.iters, payload_resolution=args.payload, seed=args.seed)
    t0 = time.perf_counter()
    result = fit_subject(subj.views, subj.mesh, subj.frames, cfg,
                         callback=lambda it, row: it % 100 == 0 and print(f"iter {it:5d}  loss {row[1]:.5f}"))
    seconds = time.perf_counter() - t0
    save_primitive_set(result.primitive_set, out / "fit.prm")

    march = MarchConfig.for_set(subj.gt_set)
    scores = []
    for v, cam in enumerate(held_out_cameras(args.views, args.res, args.held_out)):
        pred, gt = render(result.primitive_set, cam, march).rgb, render(subj.gt_set, cam, march).rgb
        scores.append(psnr(pred, gt))
        save_png(np.concatenate([gt, pred], axis=1), out / f"heldout_{v:02d}.png")
    summary = {"psnr_db": scores, "psnr_min_db": min(scores), "psnr_mean_db": float(np.mean(scores)),
               "fit_seconds": seconds, "config": cfg.to_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"held-out PSNR min {min(scores):.2f} dB, mean {np.mean(scores):.2f} dB; fit {seconds:.1f} s")


if __name__ == "__main__":
    main()
