"""``singleshape`` command line.

Exit codes: 0 success, 1 runtime failure, 2 missing or corrupt checkpoint,
3 invalid configuration key, 64 bad command-line usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import resource
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_model,
    read_manifest,
    save_checkpoint,
    train_lock,
)
from .config import ConfigError, load_config
from .mesh import grid_to_obj
from .metrics import ConfigurationError, FeatureExtractor, diversity, lp_metrics, ssfid
from .objfile import Mesh, read_obj
from .sampler import GenerationRequest, generate, interpolate, reconstruct
from .train import TrainingError, init_state, train_all
from .voxgrid import (
    GridFormatError,
    box_resample,
    build_pyramid,
    load_source,
    round_half_up,
    save_grid,
    voxelize_mesh,
    voxelize_to_dims,
)

log = logging.getLogger("singleshape")

EXIT_OK, EXIT_FAIL, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_USAGE = 0, 1, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for checkpoint errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like DxHxW, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive ints, got {text!r}")
    return dims


def _number_list(kind):
    def parse(text: str):
        try:
            return [kind(p) for p in text.split(",") if p.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def _finite_or_none(value):
    return value if value is None or np.isfinite(value) else None


def _write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_shape(grid: np.ndarray, path: Path, mesh: bool, comment: str) -> list[str]:
    save_grid(grid, path)
    written = [path.name]
    if mesh:
        obj = path.with_suffix(".obj")
        grid_to_obj(grid, obj, comment=comment)
        written.append(obj.name)
    return written


def _dims_str(dims) -> str:
    return "x".join(str(int(s)) for s in dims)


# ---------------------------------------------------------------------------
# commands

def cmd_voxelize(args) -> int:
    mesh = read_obj(args.mesh)
    grid = voxelize_mesh(mesh, args.res)
    save_grid(grid, args.out)
    print(json.dumps({"command": "voxelize", "dims": list(grid.shape),
                      "occupancy": float(grid.mean()), "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    torch.use_deterministic_algorithms(cfg.deterministic)
    with train_lock(out):
        if args.resume:
            state, pyramid = load_checkpoint(out)
            saved = asdict(state.config) | asdict(pyramid.config)
            wanted = asdict(cfg.train) | asdict(cfg.pyramid)
            for key in sorted(wanted):
                if saved.get(key) != wanted[key]:
                    raise ConfigError(key, f"differs from the checkpoint ({saved.get(key)!r})")
            mode = "a"
        else:
            source = load_source(args.input)
            pyramid = build_pyramid(source, cfg.pyramid)
            state = init_state(pyramid.dims, cfg.train)
            mode = "w"
        log_path = out / cfg.log_file
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open(mode) as fh:
            def emit(rec):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()

            emit({"event": "start", "resume_from_level": state.levels_done, "seed": cfg.train.seed,
                  "level_dims": [list(d) for d in pyramid.dims], "config": cfg.as_flat(),
                  "input": str(args.input)})

            def on_scale_end(st):
                save_checkpoint(st, pyramid, out)
                lvl = st.levels_done - 1
                emit({"event": "scale_end", "level": lvl, "sigma": st.sigmas[lvl]})

            if state.levels_done == 0:
                save_checkpoint(state, pyramid, out)
            train_all(pyramid, cfg.train, state, on_scale_end=on_scale_end,
                      callback=lambda rec: emit({"event": "iter", **rec}))
            emit({"event": "done", "levels": state.levels_done})
    print(json.dumps({"command": "train", "levels": state.levels_done, "seed": cfg.train.seed,
                      "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    stack = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(args.count):
        seed = args.seed + k
        req = GenerationRequest(coarse_dims=args.dims, upsample=args.upsample, seed=seed)
        grid = generate(stack, req)
        name = f"sample_{k:04d}.ssgv"
        files = _write_shape(grid, out / name, args.mesh, f"singleshape sample seed={seed}")
        records.append({"index": k, "seed": seed, "dims": list(grid.shape),
                        "coarse_dims": list(args.dims or stack.coarse_dims),
                        "upsample": args.upsample, "files": files})
    _write_jsonl(out / "samples.jsonl", records)
    print(json.dumps({"command": "generate", "count": args.count, "seed": args.seed,
                      "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    stack = load_model(args.model)
    grid = reconstruct(stack, upsample=args.upsample)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".obj":
        grid_to_obj(grid, out, comment="singleshape reconstruction")
    else:
        save_grid(grid, out)
    print(json.dumps({"command": "reconstruct", "dims": list(grid.shape), "out": str(out)},
                     sort_keys=True))
    return EXIT_OK


def cmd_interpolate(args) -> int:
    stack = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, alpha in enumerate(args.alphas):
        grid = interpolate(stack, args.seed_a, args.seed_b, alpha)
        name = f"interp_{k:02d}.ssgv"
        save_grid(grid, out / name)
        records.append({"index": k, "alpha": alpha, "seed_a": args.seed_a, "seed_b": args.seed_b,
                        "plane_noise": "zeros", "file": name})
    _write_jsonl(out / "interpolation.jsonl", records)
    print(json.dumps({"command": "interpolate", "count": len(records), "seed_a": args.seed_a,
                      "seed_b": args.seed_b, "out": str(out)}, sort_keys=True))
    return EXIT_OK


def _real_grid(path, dims) -> np.ndarray:
    source = load_source(path)
    if isinstance(source, Mesh):
        return voxelize_to_dims(source, dims)
    if source.shape != tuple(dims):
        source = (box_resample(source, dims) >= 0.5).astype(np.float32)
    return source


def cmd_evaluate(args) -> int:
    stack = load_model(args.model)
    real = _real_grid(args.real, stack.finest_dims)
    seeds = [args.seed + k for k in range(args.count)]
    gens = [generate(stack, GenerationRequest(seed=s, binarize=True)) for s in seeds]
    base = {"n_generated": args.count, "seed": args.seed, "real": str(args.real)}
    lp = lp_metrics(real, gens, seed=args.seed)
    rows = [
        {"metric": "lp_iou", "value": _finite_or_none(lp["lp_iou"]), "real_patches": lp["real_patches"],
         "shapes_without_patches": lp["shapes_without_patches"], **base},
        {"metric": "lp_fscore", "value": _finite_or_none(lp["lp_fscore"]), "real_patches": lp["real_patches"],
         "shapes_without_patches": lp["shapes_without_patches"], **base},
        {"metric": "diversity", "value": diversity(gens) if args.count > 1 else None,
         **base},
    ]
    if args.ssfid_weights:
        extractor = FeatureExtractor.from_weights(args.ssfid_weights)
        rows.append({"metric": "ssfid", "value": ssfid(real, gens, extractor),
                     "weights": str(args.ssfid_weights), **base})
    else:
        rows.append({"metric": "ssfid", "value": None, "status": "skipped: no weights", **base})
    _write_jsonl(args.out, rows)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _benchmark_worker(model_dir: str, dims, trials: int, seed: int, queue) -> None:
    try:
        torch.set_num_threads(max(1, torch.get_num_threads()))
        stack = load_model(model_dir)
        generate(stack, GenerationRequest(seed=seed, output_dims=stack.finest_dims))
        base = _peak_rss_mb()
        times = []
        for t in range(trials):
            start = time.perf_counter()
            generate(stack, GenerationRequest(seed=seed + t, output_dims=dims))
            times.append(time.perf_counter() - start)
        queue.put({"ok": True, "times": times, "peak_rss_mb": _peak_rss_mb(), "base_rss_mb": base})
    except Exception as exc:  # reported back to the parent
        queue.put({"ok": False, "error": f"{type(exc).__name__}: {exc}"})


def benchmark_dims(finest_dims, resolution: int) -> tuple[int, int, int]:
    """Output dims whose largest side is ``resolution``, keeping the trained aspect ratio."""
    m = max(finest_dims)
    return tuple(max(1, round_half_up(s * resolution / m)) for s in finest_dims)


def cmd_benchmark(args) -> int:
    manifest = read_manifest(args.model)
    load_model(args.model)  # fail fast on an incomplete or corrupt model
    finest = manifest["level_dims"][-1]
    ctx = mp.get_context("spawn")
    rows = []
    for res in args.resolutions:
        dims = benchmark_dims(finest, res)
        queue = ctx.Queue()
        proc = ctx.Process(target=_benchmark_worker,
                           args=(str(args.model), dims, args.trials, args.seed, queue))
        proc.start()
        result = queue.get()
        proc.join()
        if not result["ok"]:
            raise RuntimeError(f"benchmark at {res} failed: {result['error']}")
        rows.append({"resolution": res, "dims": _dims_str(dims), "trials": args.trials,
                     "seed": args.seed, "mean_time_s": float(np.mean(result["times"])),
                     "peak_rss_mb": result["peak_rss_mb"], "base_rss_mb": result["base_rss_mb"],
                     "device": "cpu"})
        print(json.dumps(rows[-1], sort_keys=True))
    _write_jsonl(args.out, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="singleshape", description="Learn a generative model from one 3D shape.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("voxelize", help="voxelize an OBJ mesh to an SSGV grid")
    s.add_argument("--mesh", required=True, type=Path)
    s.add_argument("--res", required=True, type=int, help="cells along the largest axis")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", help="train a model on one shape")
    s.add_argument("--input", required=True, type=Path, help=".obj mesh or .ssgv grid")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample random shapes")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--count", required=True, type=int)
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--dims", type=parse_dims, help="coarsest noise dims DxHxW")
    s.add_argument("--upsample", type=int, default=1)
    s.add_argument("--mesh", action="store_true", help="also write smoothed OBJ meshes")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("reconstruct", help="decode the training shape from the anchor noise")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--upsample", type=int, default=1)
    s.add_argument("--out", required=True, type=Path, help=".ssgv grid or .obj mesh")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("interpolate", help="blend the coarsest noise of two seeds")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--seed-a", required=True, type=int)
    s.add_argument("--seed-b", required=True, type=int)
    s.add_argument("--alphas", required=True, type=_number_list(float))
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("evaluate", help="LP-IoU, LP-F-score, diversity and SSFID report")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--real", required=True, type=Path)
    s.add_argument("--count", required=True, type=int)
    s.add_argument("--seed", type=int, default=0, help="first sample seed")
    s.add_argument("--ssfid-weights", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", help="peak memory and mean generation time per resolution")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--resolutions", required=True, type=_number_list(int))
    s.add_argument("--trials", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_benchmark)
    return p


def _check_args(args) -> None:
    for name in ("count", "trials", "upsample", "res"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name} must be >= 1, got {value}")
    if getattr(args, "resolutions", None) is not None and (
            not args.resolutions or min(args.resolutions) < 1):
        raise UsageError("--resolutions needs positive integers")
    if getattr(args, "alphas", None) is not None and not args.alphas:
        raise UsageError("--alphas needs at least one value")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_args(args)
        return args.func(args)
    except UsageError as exc:
        print(f"singleshape {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"singleshape {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"singleshape {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, GridFormatError, TrainingError, ConfigurationError,
            RuntimeError) as exc:
        print(f"singleshape {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
