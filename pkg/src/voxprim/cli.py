"""Command-line front end: ``voxprim <command> --flag value ...``.

Every run writes a JSON manifest (argv, seed, configs, timings, versions and
sha256 of each output) next to its outputs; ``voxprim replay --manifest m.json``
re-executes it single-threaded and checks the hashes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io as _stdio
import json
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .body import init_primitive_frames, load_poses, load_rigged_mesh
from .camera import load_cameras
from .diffusion import (Normalization, PackedTensor, block_mask, inpaint, make_schedule, nearest_neighbor_denoiser,
                        pack, packed_shape, sample, unpack)
from .fitting import FitConfig, FitResult, fit_subject
from .io import (FileFormatError, atomic_write_text, load_packed, load_primitive_set, save_packed, save_pfm, save_png,
                 save_primitive_set)
from .render import MarchConfig, posed_set, prepare_scene, render, render_sequence
from .synth import load_subject_dir, make_synthetic_subject, save_subject_dir, transfer_texture

EXIT_OK = 0
EXIT_UNKNOWN_COMMAND = 2
EXIT_MISSING_FLAG = 3
EXIT_FILE = 4
EXIT_VALIDATION = 5
EXIT_NUMERIC = 6
EXIT_REPLAY_MISMATCH = 7

COMMANDS = ("make-synth", "fit", "render", "animate", "sample", "inpaint", "transfer", "bench", "replay")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "required" in message and "command" not in message:
            raise CliError(message, EXIT_MISSING_FLAG)
        raise CliError(message, EXIT_UNKNOWN_COMMAND)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxprim", description="Volumetric-primitive bodies: synthesize, fit, render, sample.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--threads", type=int, default=None, help="numba worker threads")
        c.add_argument("--seed", type=int, default=0)
        return c

    c = cmd("make-synth", "render a procedurally textured toy subject to a data directory")
    c.add_argument("--out", required=True)
    c.add_argument("--views", type=int, default=16)
    c.add_argument("--res", type=int, default=128)
    c.add_argument("--grid", type=int, default=16, help="UV grid width W")
    c.add_argument("--payload", type=int, default=4, help="payload resolution S")

    c = cmd("fit", "fit primitive payloads to a data directory")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--iters", type=int, default=None)
    c.add_argument("--config", default=None, help="fit config JSON (FitConfig fields)")
    c.add_argument("--grid", type=int, default=None)
    for f in fields(FitConfig):
        if f.name in ("iterations", "seed"):
            continue  # --iters / --seed
        kind = float if f.name == "step" else type(f.default)
        c.add_argument("--" + f.name.replace("_", "-"), dest="fit_" + f.name, type=kind, default=None,
                       help=f"FitConfig.{f.name} (default {f.default})")

    c = cmd("render", "render a primitive set from one or more cameras")
    c.add_argument("--set", required=True)
    c.add_argument("--camera", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--mesh", default=None)
    c.add_argument("--pose", default=None)

    c = cmd("animate", "render a pose sequence")
    c.add_argument("--set", required=True)
    c.add_argument("--mesh", required=True)
    c.add_argument("--pose", required=True)
    c.add_argument("--camera", required=True)
    c.add_argument("--out", required=True)

    c = cmd("sample", "ancestral sampling with a nearest-neighbor denoiser")
    c.add_argument("--dataset", required=True, help="comma-separated PRM files or a directory of them")
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int, default=1000)

    c = cmd("inpaint", "mask-guided sampling that keeps the unmasked part of --set")
    c.add_argument("--set", required=True)
    c.add_argument("--mask", required=True, help="JSON {\"cells\": [[i, j], ...]} or a PKT1 tensor of 0/1")
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int, default=1000)

    c = cmd("transfer", "put the color payloads of --dataset onto --set")
    c.add_argument("--set", required=True, help="destination (geometry and density kept)")
    c.add_argument("--dataset", required=True, help="texture source")
    c.add_argument("--out", required=True)

    c = cmd("bench", "time repeated renders")
    c.add_argument("--set", required=True)
    c.add_argument("--camera", required=True)
    c.add_argument("--repeat", type=int, default=50)
    c.add_argument("--out", default=None, help="manifest path (default: bench.manifest.json)")

    c = sub.add_parser("replay", help="re-run a manifest single-threaded and compare output hashes")
    c.add_argument("--manifest", required=True)
    c.add_argument("--threads", type=int, default=1)
    return p


# --------------------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"voxprim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _set_threads(n: int | None) -> int:
    if n is not None:
        if n < 1:
            raise CliError(f"--threads must be >= 1, got {n}", EXIT_VALIDATION)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


def _dataset_paths(arg: str) -> list[Path]:
    p = Path(arg)
    if p.is_dir():
        paths = sorted(p.glob("*.prm"))
        if not paths:
            raise FileNotFoundError(f"no .prm files in {p}")
        return paths
    return [Path(s) for s in arg.split(",") if s]


def _load_dataset(arg: str):
    sets = [load_primitive_set(p) for p in _dataset_paths(arg)]
    W, S = sets[0].grid_width, sets[0].S
    for p, s in zip(_dataset_paths(arg), sets):
        if (s.grid_width, s.S) != (W, S):
            raise ValueError(f"{p}: layout W={s.grid_width}, S={s.S} differs from W={W}, S={S}")
    return sets


def _write_trace(result: FitResult, path: Path) -> None:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FitResult.TRACE_COLUMNS)
    for row in result.trace:
        w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
    atomic_write_text(path, buf.getvalue())


def _fit_config(args, meta: dict) -> FitConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"fit config not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        known = {f.name for f in fields(FitConfig)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"{path}: unknown fit config keys {sorted(extra)}")
    for f in fields(FitConfig):
        value = getattr(args, "fit_" + f.name, None)
        if value is not None:
            doc[f.name] = value
    doc["seed"] = args.seed
    if "payload_resolution" in meta:
        doc.setdefault("payload_resolution", int(meta["payload_resolution"]))
    if args.iters is not None:
        doc["iterations"] = args.iters
    return FitConfig(**doc)


def _render_outputs(outs, out_dir: Path, prefix: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for v, o in enumerate(outs):
        for name, saver, arr in ((f"{prefix}_{v:03d}.png", save_png, o.rgb),
                                 (f"alpha_{v:03d}.pfm", save_pfm, o.alpha),
                                 (f"depth_{v:03d}.pfm", save_pfm, o.depth),
                                 (f"rgb_{v:03d}.pfm", save_pfm, o.rgb)):
            written.append(out_dir / name)
            saver(arr, written[-1])
    return written


def _manifest_path(out: Path) -> Path:
    if out.suffix and not out.is_dir():
        return out.with_name(out.stem + ".manifest.json")
    return out / "manifest.json"


# --------------------------------------------------------------------------- commands


def _cmd_make_synth(args, info):
    for name in ("views", "res", "grid", "payload"):
        if getattr(args, name) < 1:
            raise ValueError(f"--{name} must be >= 1")
    t0 = time.perf_counter()
    subject = make_synthetic_subject(seed=args.seed, W=args.grid, S=args.payload, n_views=args.views,
                                     resolution=args.res)
    info["timings"]["synthesize_s"] = time.perf_counter() - t0
    info["config"] = {"grid_width": args.grid, "payload_resolution": args.payload, "n_views": args.views,
                      "resolution": args.res, "march": subject.march.to_dict()}
    out = Path(args.out)
    return save_subject_dir(subject, out), out


def _cmd_fit(args, info):
    data, mesh, frames, meta = load_subject_dir(args.data, args.grid)
    cfg = _fit_config(args, meta)
    info["config"] = {"fit": cfg.to_dict(), "grid_width": frames.grid_width}
    t0 = time.perf_counter()
    result = fit_subject(data, mesh, frames, cfg)
    info["timings"]["fit_s"] = time.perf_counter() - t0
    if len(result.trace):
        info["final_loss"] = dict(zip(FitResult.TRACE_COLUMNS[1:], map(float, result.trace[-1, 1:])))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_primitive_set(result.primitive_set, out)
    trace = out.with_name(out.stem + ".trace.csv")
    _write_trace(result, trace)
    return [out, trace], out


def _cmd_render(args, info):
    pset = load_primitive_set(args.set)
    cams = load_cameras(args.camera)
    cfg = MarchConfig.for_set(pset)
    if (args.mesh is None) != (args.pose is None):
        raise CliError("--mesh and --pose must be given together", EXIT_MISSING_FLAG)
    if args.mesh is not None:
        mesh = load_rigged_mesh(args.mesh)
        pose = load_poses(args.pose, mesh.n_joints)[0]
        pset = posed_set(pset, mesh, init_primitive_frames(mesh, pset.grid_width), pose)
    info["config"] = {"march": cfg.to_dict(), "n_cameras": len(cams)}
    t0 = time.perf_counter()
    scene = prepare_scene(pset)
    outs = [render(pset, cam, cfg, scene=scene) for cam in cams]
    info["timings"]["render_s"] = time.perf_counter() - t0
    out = Path(args.out)
    return _render_outputs(outs, out, "view"), out


def _cmd_animate(args, info):
    pset = load_primitive_set(args.set)
    mesh = load_rigged_mesh(args.mesh)
    poses = load_poses(args.pose, mesh.n_joints)
    cams = load_cameras(args.camera)
    if len(cams) != len(poses):
        cams = cams[:1]  # one fixed viewpoint for the whole sequence
    cfg = MarchConfig.for_set(pset)
    frames = init_primitive_frames(mesh, pset.grid_width)
    info["config"] = {"march": cfg.to_dict(), "n_poses": len(poses), "n_cameras": len(cams)}
    t0 = time.perf_counter()
    outs = render_sequence(pset, cfg, cams, poses=poses, mesh=mesh, frames=frames)
    info["timings"]["render_s"] = time.perf_counter() - t0
    out = Path(args.out)
    return _render_outputs(outs, out, "frame"), out


def _write_sample(V: np.ndarray, template, norm, out: Path, extra: dict) -> list[Path]:
    tensor = PackedTensor(V, template.grid_width, template.S)
    pset = unpack(tensor, template, norm).validate()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_primitive_set(pset, out)
    pkt = out.with_suffix(".pkt")
    save_packed(tensor, pkt, norm, extra)
    return [out, pkt, pkt.with_name(pkt.name + ".json")]


def _cmd_sample(args, info):
    sets = _load_dataset(args.dataset)
    norm = Normalization()
    schedule = make_schedule(args.steps)
    data = [pack(s, norm).data for s in sets]
    den = nearest_neighbor_denoiser(data, schedule)
    info["config"] = {"schedule": schedule.to_dict(), "normalization": norm.to_dict(),
                      "dataset": [str(p) for p in _dataset_paths(args.dataset)], "denoiser": "nearest_neighbor"}
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    V = sample(den, schedule, packed_shape(sets[0].grid_width, sets[0].S), rng)
    info["timings"]["sample_s"] = time.perf_counter() - t0
    dist = [float(np.linalg.norm(V - x)) for x in data]
    info["nearest_item"] = int(np.argmin(dist))
    info["nearest_distance"] = min(dist)
    out = Path(args.out)
    return _write_sample(V, sets[0], norm, out, {"schedule": schedule.to_dict()}), out


def _load_mask(arg: str, W: int, S: int) -> np.ndarray:
    path = Path(arg)
    if not path.is_file():
        raise FileNotFoundError(f"mask file not found: {path}")
    if path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        cells = doc["cells"] if isinstance(doc, dict) else doc
        for i, j in cells:
            if not (0 <= i < W and 0 <= j < W):
                raise ValueError(f"{path}: mask cell ({i}, {j}) outside the {W}x{W} grid")
        return block_mask(W, S, cells)
    tensor, _ = load_packed(path)
    if (tensor.W, tensor.S) != (W, S):
        raise ValueError(f"{path}: mask layout W={tensor.W}, S={tensor.S} does not match W={W}, S={S}")
    return tensor.data


def _cmd_inpaint(args, info):
    known_set = load_primitive_set(args.set)
    sets = _load_dataset(args.dataset)
    W, S = known_set.grid_width, known_set.S
    if (sets[0].grid_width, sets[0].S) != (W, S):
        raise ValueError(f"dataset layout W={sets[0].grid_width}, S={sets[0].S} differs from --set W={W}, S={S}")
    mask = _load_mask(args.mask, W, S)
    norm = Normalization()
    schedule = make_schedule(args.steps)
    den = nearest_neighbor_denoiser([pack(s, norm).data for s in sets], schedule)
    info["config"] = {"schedule": schedule.to_dict(), "normalization": norm.to_dict(),
                      "dataset": [str(p) for p in _dataset_paths(args.dataset)], "mask": str(args.mask),
                      "masked_fraction": float(mask.mean())}
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    V = inpaint(den, schedule, pack(known_set, norm).data, mask, rng)
    info["timings"]["inpaint_s"] = time.perf_counter() - t0
    out = Path(args.out)
    return _write_sample(V, known_set, norm, out, {"schedule": schedule.to_dict()}), out


def _cmd_transfer(args, info):
    dst = load_primitive_set(args.set)
    src = load_primitive_set(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_primitive_set(transfer_texture(src, dst), out)
    info["config"] = {"source": str(args.dataset), "destination": str(args.set)}
    return [out], out


def _cmd_bench(args, info):
    if args.repeat < 1:
        raise ValueError("--repeat must be >= 1")
    pset = load_primitive_set(args.set)
    cam = load_cameras(args.camera)[0]
    cfg = MarchConfig.for_set(pset)
    scene = prepare_scene(pset)
    render(pset, cam, cfg, scene=scene)  # JIT warm-up
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        render(pset, cam, cfg, scene=scene)
        times.append(time.perf_counter() - t0)
    ms = 1000.0 * float(np.mean(times))
    info["config"] = {"march": cfg.to_dict(), "K": pset.K, "S": pset.S, "resolution": [cam.width, cam.height]}
    info["bench"] = {"mean_ms_per_frame": ms, "min_ms_per_frame": 1000.0 * min(times), "fps": 1000.0 / ms,
                     "repeat": args.repeat}
    print(f"{cam.width}x{cam.height} K={pset.K} S={pset.S}: {ms:.1f} ms/frame, {1000.0 / ms:.2f} FPS")
    out = Path(args.out) if args.out else Path("bench.manifest.json")
    return [], out


HANDLERS = {
    "make-synth": _cmd_make_synth, "fit": _cmd_fit, "render": _cmd_render, "animate": _cmd_animate,
    "sample": _cmd_sample, "inpaint": _cmd_inpaint, "transfer": _cmd_transfer, "bench": _cmd_bench,
}


def _run(args, argv: list[str]) -> Path:
    info = {"command": args.command, "argv": list(argv), "seed": args.seed, "timings": {}}
    info["threads"] = _set_threads(args.threads)
    t0 = time.perf_counter()
    written, out = HANDLERS[args.command](args, info)
    info["timings"]["total_s"] = time.perf_counter() - t0
    info["versions"] = _versions()
    info["outputs"] = {str(p): _sha256(p) for p in written}
    mpath = out if args.command == "bench" and args.out else _manifest_path(out)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(mpath, json.dumps(info, indent=1))
    return mpath


def _replay(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "argv" not in doc or "outputs" not in doc:
        raise ValueError(f"{path}: not a run manifest")
    argv = list(doc["argv"])
    if "--threads" in argv:
        k = argv.index("--threads")
        del argv[k:k + 2]
    argv += ["--threads", str(args.threads)]
    sub = _build_parser().parse_args(argv)
    _run(sub, argv)
    mismatched = [p for p, h in doc["outputs"].items() if not Path(p).is_file() or _sha256(Path(p)) != h]
    if mismatched:
        print(f"replay mismatch in {len(mismatched)} output(s): {mismatched[0]}", file=sys.stderr)
        return EXIT_REPLAY_MISMATCH
    print(f"replay reproduced {len(doc['outputs'])} output(s) bitwise")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "replay":
            return _replay(args)
        _run(args, argv)
        return EXIT_OK
    except CliError as exc:
        print(f"voxprim: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, IsADirectoryError, PermissionError, FileFormatError) as exc:
        print(f"voxprim: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (ValueError, KeyError, TypeError) as exc:
        print(f"voxprim: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FloatingPointError as exc:
        print(f"voxprim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"voxprim: file error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
