"""Numbered acceptance criteria; each prints one PASS/FAIL line in the terminal summary."""

import json
import time

import numpy as np
import pytest

from helpers import box_set, fd_check, graded_oracle, graded_slab, random_set, shoot, slab
from voxprim.body import _CHARTS, make_toy_body
from voxprim.camera import ring_cameras, save_cameras
from voxprim.cli import main
from voxprim.diffusion import (Normalization, block_mask, gaussian_oracle_denoiser, inpaint, make_schedule,
                               nearest_neighbor_denoiser, pack, posterior_mean, predict_mean, q_sample, sample, unpack,
                               PackedTensor)
from voxprim.fitting import FitConfig, fit_subject, psnr
from voxprim.io import save_primitive_set
from voxprim.render import MarchConfig, prepare_scene, render
from voxprim.synth import held_out_cameras, make_synthetic_subject, transfer_texture

acceptance = pytest.mark.acceptance


def fitted_toy(seed, W=8, S=2, n_views=8, resolution=48, iterations=200):
    subj = make_synthetic_subject(seed=seed, W=W, S=S, n_views=n_views, resolution=resolution,
                                  mesh=make_toy_body(segments=(12, 16), seed=seed))
    cfg = FitConfig(iterations=iterations, payload_resolution=S, seed=seed, batch=2048)
    return subj, fit_subject(subj.views, subj.mesh, subj.frames, cfg).primitive_set


@pytest.fixture(scope="module")
def toy_dataset():
    """Three fitted toy subjects plus a fourth held out of the dataset."""
    return [fitted_toy(seed) for seed in (31, 32, 33, 34)]


# ------------------------------------------------------------------ 1


@acceptance(1, "round-trip fit: held-out PSNR >= 30 dB within 15 min")
def test_fit_round_trip(record_property):
    t0 = time.perf_counter()
    subj = make_synthetic_subject(seed=7, W=16, S=4, n_views=16, resolution=128)
    result = fit_subject(subj.views, subj.mesh, subj.frames, FitConfig(payload_resolution=4))
    minutes = (time.perf_counter() - t0) / 60
    cams = held_out_cameras(16, 128, n=4)
    cfg = MarchConfig.for_set(subj.gt_set)
    scores = [psnr(render(result.primitive_set, c, cfg).rgb, render(subj.gt_set, c, cfg).rgb) for c in cams]
    record_property("psnr_min_db", round(min(scores), 2))
    record_property("psnr_mean_db", round(float(np.mean(scores)), 2))
    record_property("minutes", round(minutes, 2))
    assert min(scores) >= 30.0
    assert minutes <= 15.0


# ------------------------------------------------------------------ 2


@acceptance(2, "renderer closed forms within 1% and convergent")
def test_renderer_oracle(record_property):
    t0 = time.perf_counter()
    sigma, c, L = 2.0, 0.7, 1.0
    rgb, alpha, _ = shoot(slab(sigma, c, L), L / 200)
    a = 1 - np.exp(-sigma * L)
    errs = [abs(alpha - a) / a, abs(rgb[0] - c * a) / (c * a)]

    two = box_set([[0, 0, 0], [0, 0, 2.0], [9, 9, 0], [-9, 9, 0]], [[1, 1, 0.25], [1, 1, 0.5], [1, 1, 1], [1, 1, 1]],
                  [[0.9, 0.1, 0.3], [0.2, 0.8, 0.6], [1, 1, 1], [1, 1, 1]], [3.0, 1.5, 1.0, 1.0])
    rgb, alpha, _ = shoot(two, 0.5 / 200)
    a1, a2 = 1 - np.exp(-1.5), 1 - np.exp(-1.5)
    expect = np.array([0.9, 0.1, 0.3]) * a1 + (1 - a1) * np.array([0.2, 0.8, 0.6]) * a2
    errs += list(np.abs(rgb - expect) / expect) + [abs(alpha - (1 - (1 - a1) * (1 - a2))) / (1 - (1 - a1) * (1 - a2))]

    pix, _ = graded_oracle()
    conv = [abs(shoot(graded_slab(), 1.0 / n)[0][0] - pix) for n in (200, 400)]
    seconds = time.perf_counter() - t0
    record_property("max_rel_err", f"{max(errs):.2e}")
    record_property("graded_err_200_400", f"{conv[0]:.1e}/{conv[1]:.1e}")
    record_property("seconds", round(seconds, 3))
    assert max(errs) <= 1e-2
    assert conv[1] < conv[0]
    assert seconds < 1.0


# ------------------------------------------------------------------ 3


@acceptance(3, "analytic gradients match central differences (>= 200 params, 5 scenes)")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    errs = [e for seed in range(5) for _, e in fd_check(100 + seed, n_params=45)]
    seconds = time.perf_counter() - t0
    record_property("n_params", len(errs))
    record_property("max_rel_err", f"{max(errs):.2e}")
    record_property("seconds", round(seconds, 1))
    assert len(errs) >= 200
    assert max(errs) <= 1e-3
    assert seconds < 60


# ------------------------------------------------------------------ 4


def _best_time(fn, repeat=3):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


@acceptance(4, "BVH render bitwise equal to brute force; >= 3x faster at K=1024")
def test_bvh_equivalence(record_property):
    cam_small = ring_cameras(1, 64, radius=3.5, height=0.0)[0]
    for W in (4, 16, 32):
        s = random_set(np.random.default_rng(W), W=W, S=2, spread=1.0, size=(0.03, 0.12))
        cfg = MarchConfig(s.default_step())
        scene = prepare_scene(s)
        a = render(s, cam_small, cfg, scene=scene, use_bvh=True)
        b = render(s, cam_small, cfg, scene=scene, use_bvh=False)
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.alpha, b.alpha) and np.array_equal(a.depth, b.depth)
    cam = ring_cameras(1, 256, radius=3.5, height=0.0)[0]
    t_bvh = _best_time(lambda: render(s, cam, cfg, scene=scene, use_bvh=True))
    t_brute = _best_time(lambda: render(s, cam, cfg, scene=scene, use_bvh=False))
    record_property("bvh_ms", round(1000 * t_bvh, 1))
    record_property("brute_ms", round(1000 * t_brute, 1))
    record_property("speedup", round(t_brute / t_bvh, 1))
    assert t_brute / t_bvh >= 3.0


# ------------------------------------------------------------------ 5


@acceptance(5, "fitted K=1024, S=8 subject renders 512x512 at >= 2 FPS; bench manifest")
def test_render_throughput(record_property, tmp_path):
    subj = make_synthetic_subject(seed=5, W=32, S=8, n_views=8, resolution=128)
    fitted = fit_subject(subj.views, subj.mesh, subj.frames,
                         FitConfig(iterations=100, payload_resolution=8, batch=4096)).primitive_set
    save_primitive_set(fitted, tmp_path / "fit.prm")
    save_cameras(ring_cameras(1, 512), tmp_path / "cam.json")
    assert main(["bench", "--set", str(tmp_path / "fit.prm"), "--camera", str(tmp_path / "cam.json"),
                 "--repeat", "5", "--out", str(tmp_path / "bench.json")]) == 0
    bench = json.loads((tmp_path / "bench.json").read_text())["bench"]
    record_property("K", fitted.K)
    record_property("fps", round(bench["fps"], 2))
    assert fitted.K == 1024 and fitted.S == 8
    assert bench["fps"] >= 2.0


# ------------------------------------------------------------------ 6


@acceptance(6, "diffusion formula suite")
def test_diffusion_formulas(record_property):
    t0 = time.perf_counter()
    sch = make_schedule(1000)
    prod, ref = 1.0, []
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
        ref.append(prod)
    sched_err = float(np.abs(sch.alpha_bar - ref).max())

    rng = np.random.default_rng(0)
    n, z = 100_000, []
    for t, v0 in ((1, 0.3), (300, 0.8), (900, -1.0)):
        x = q_sample(np.full(n, v0), t, rng.standard_normal(n), sch)
        ab = sch.abar(t)
        z.append(abs(x.mean() - np.sqrt(ab) * v0) / np.sqrt((1 - ab) / n))
        z.append(abs(x.var(ddof=1) - (1 - ab)) / ((1 - ab) * np.sqrt(2 / (n - 1))))

    ident = 0.0
    for t in (1, 2, 10, 500, 999, 1000):
        V0, Vt = rng.normal(size=(8, 8, 14)), rng.normal(size=(8, 8, 14))
        mu, _ = posterior_mean(Vt, V0, t, sch)
        ident = max(ident, float(np.abs(predict_mean(Vt, t, lambda v, s: V0, sch) - mu).max()))
    V0 = rng.normal(size=(8, 8, 14))
    mu, var = posterior_mean(rng.normal(size=V0.shape), V0, 1, sch)
    seconds = time.perf_counter() - t0
    record_property("schedule_err", f"{sched_err:.1e}")
    record_property("max_z", round(max(z), 2))
    record_property("mean_identity_err", f"{ident:.1e}")
    record_property("seconds", round(seconds, 2))
    assert sched_err <= 1e-12
    assert max(z) <= 3.0
    assert ident <= 1e-10
    assert np.array_equal(mu, V0) and var == 0.0
    assert seconds < 60


# ------------------------------------------------------------------ 7


@acceptance(7, "Gaussian-oracle sampler recovers N(0, 1)")
def test_sampler_correctness(record_property):
    t0 = time.perf_counter()
    sch = make_schedule(100)
    x = sample(gaussian_oracle_denoiser(0.0, 1.0, sch), sch, (1000, 8), np.random.default_rng(2024))
    m, v = x.mean(0), x.var(0)
    seconds = time.perf_counter() - t0
    record_property("max_abs_mean", round(float(np.abs(m).max()), 4))
    record_property("var_range", f"[{v.min():.3f}, {v.max():.3f}]")
    record_property("seconds", round(seconds, 2))
    assert np.all(np.abs(m) <= 3 / np.sqrt(1000))
    assert np.all((v >= 0.9) & (v <= 1.1))
    assert seconds < 120


# ------------------------------------------------------------------ 8


@acceptance(8, "nearest-neighbor generative demo lands on fitted subjects")
def test_generative_demo(record_property, toy_dataset):
    norm = Normalization()
    sets = [s for _, s in toy_dataset[:3]]
    data = [pack(s, norm).data for s in sets]
    sch = make_schedule(1000)
    den = nearest_neighbor_denoiser(data, sch)
    tol = 0.05 * np.sqrt(data[0].size)
    worst, hits = 0.0, set()
    for seed in range(20):
        V = sample(den, sch, data[0].shape, np.random.default_rng(seed))
        d = [np.linalg.norm(V - x) for x in data]
        worst = max(worst, min(d))
        hits.add(int(np.argmin(d)))
    out = unpack(PackedTensor(V, sets[0].grid_width, sets[0].S), sets[int(np.argmin(d))], norm).validate()
    img = render(out, ring_cameras(1, 48)[0], MarchConfig.for_set(out))
    record_property("worst_distance", round(worst, 4))
    record_property("tolerance", round(tol, 3))
    record_property("items_hit", len(hits))
    record_property("alpha_mass", round(float(img.alpha.sum()), 1))
    assert worst <= tol
    assert img.alpha.sum() > 0


# ------------------------------------------------------------------ 9


def torso_cells(W):
    u0, v0, du, dv = _CHARTS["torso"]
    return [(i, j) for i in range(W) for j in range(W)
            if u0 <= (i + 0.5) / W < u0 + du and v0 <= (j + 0.5) / W < v0 + dv]


@acceptance(9, "inpainting pins known entries every step; torso lands near a dataset block")
def test_inpainting(record_property, toy_dataset):
    norm = Normalization()
    data = [pack(s, norm).data for _, s in toy_dataset[:3]]
    known_set = toy_dataset[3][1]
    known = pack(known_set, norm).data
    W, S = known_set.grid_width, known_set.S
    mask = block_mask(W, S, torso_cells(W))
    fixed = mask == 0
    sch = make_schedule(1000)
    guide = np.random.default_rng(9).spawn(1)[0]
    pinned = []

    def check(t, V):
        expect = q_sample(known, t, guide.standard_normal(known.shape), sch)
        pinned.append(np.array_equal(V[fixed], expect[fixed]))

    V = inpaint(nearest_neighbor_denoiser(data, sch), sch, known, mask, np.random.default_rng(9), callback=check)
    free = mask == 1
    dist = min(np.linalg.norm(V[free] - x[free]) for x in data)
    tol = 0.05 * np.sqrt(free.sum())
    record_property("steps_pinned", f"{sum(pinned)}/{len(pinned)}")
    record_property("masked_fraction", round(float(free.mean()), 3))
    record_property("masked_distance", round(float(dist), 4))
    record_property("tolerance", round(float(tol), 3))
    assert len(pinned) == 1000 and all(pinned)
    assert np.array_equal(V[fixed], known[fixed])
    assert dist <= tol


# ------------------------------------------------------------------ 10


@acceptance(10, "texture transfer keeps depth/alpha and changes color")
def test_texture_transfer(record_property, toy_dataset):
    (_, dst), (_, src) = toy_dataset[0], toy_dataset[1]
    out = transfer_texture(src, dst)
    cfg = MarchConfig.for_set(dst)
    max_geo, max_rgb = 0.0, 0.0
    for cam in ring_cameras(3, 48):
        a, b = render(out, cam, cfg), render(dst, cam, cfg)
        max_geo = max(max_geo, float(np.abs(a.alpha - b.alpha).max()), float(np.abs(a.depth - b.depth).max()))
        covered = b.alpha > 0.5
        max_rgb = max(max_rgb, float(np.abs(a.rgb - b.rgb)[covered].max()))
    same = render(transfer_texture(dst, dst), cam, cfg)
    record_property("max_depth_alpha_change", f"{max_geo:.1e}")
    record_property("max_color_change", round(max_rgb, 3))
    assert max_geo <= 1e-6
    assert max_rgb > 0.05
    assert np.array_equal(same.rgb, b.rgb)


# ------------------------------------------------------------------ 11


@acceptance(11, "CLI runs replay bitwise from their manifests single-threaded")
def test_cli_replay(record_property, tmp_path):
    d = tmp_path / "subj"
    runs = [
        ["make-synth", "--out", str(d), "--views", "3", "--res", "24", "--grid", "4", "--payload", "2", "--seed", "4"],
        ["fit", "--data", str(d), "--out", str(tmp_path / "fit.prm"), "--iters", "20", "--batch", "256"],
        ["render", "--set", str(tmp_path / "fit.prm"), "--camera", str(d / "cameras.json"), "--out", str(tmp_path / "r")],
        ["animate", "--set", str(tmp_path / "fit.prm"), "--mesh", str(d / "mesh.json"), "--pose", str(d / "pose.json"),
         "--camera", str(d / "cameras.json"), "--out", str(tmp_path / "a")],
        ["sample", "--dataset", f"{d / 'gt.prm'},{tmp_path / 'fit.prm'}", "--steps", "50", "--seed", "2",
         "--out", str(tmp_path / "s.prm")],
        ["transfer", "--set", str(tmp_path / "fit.prm"), "--dataset", str(d / "gt.prm"), "--out", str(tmp_path / "t.prm")],
    ]
    manifests = [d / "manifest.json", tmp_path / "fit.manifest.json", tmp_path / "r" / "manifest.json",
                 tmp_path / "a" / "manifest.json", tmp_path / "s.manifest.json", tmp_path / "t.manifest.json"]
    mask = tmp_path / "mask.json"
    mask.write_text(json.dumps({"cells": [[0, 0], [1, 2]]}))
    runs.append(["inpaint", "--set", str(tmp_path / "fit.prm"), "--mask", str(mask), "--dataset", str(d / "gt.prm"),
                 "--steps", "50", "--seed", "3", "--out", str(tmp_path / "i.prm")])
    manifests.append(tmp_path / "i.manifest.json")
    for argv in runs:
        assert main(argv) == 0, argv
    codes = [main(["replay", "--manifest", str(m), "--threads", "1"]) for m in manifests]
    n_outputs = sum(len(json.loads(m.read_text())["outputs"]) for m in manifests)
    record_property("commands", len(runs))
    record_property("outputs_compared", n_outputs)
    assert codes == [0] * len(runs)
