"""Checkpoint directories: a JSON manifest plus one safetensors blob per module.

Layout::

    manifest.json            format, version, level dims, sigmas, configs, seed, blob digests
    projection.safetensors
    generator_<i>.safetensors, decoder_<i>.safetensors   for every finished level
    discriminator.safetensors  critic of the last finished level (resume only)
    anchor.safetensors         Z_0*
    pyramid.safetensors        the training voxel pyramid
"""
from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .nets import DiscriminatorNet, GeneratorLevel, ProjectionNet
from .sampler import ModelStack
from .train import TrainConfig, TrainState
from .triplane import OccupancyDecoder
from .voxgrid import PyramidConfig, VoxelPyramid

FORMAT = "singleshape-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
LOCK = ".train.lock"


class CheckpointError(RuntimeError):
    pass


class TrainLockError(RuntimeError):
    pass


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_module(module: torch.nn.Module, path: Path) -> None:
    state = {k: v.detach().cpu().contiguous() for k, v in module.state_dict().items()}
    save_file(state, str(path))


def _load_module(module: torch.nn.Module, path: Path) -> torch.nn.Module:
    if not path.exists():
        raise CheckpointError(f"missing blob {path.name}")
    try:
        module.load_state_dict(load_file(str(path)))
    except Exception as exc:  # safetensors raises several error types
        raise CheckpointError(f"cannot load {path.name}: {exc}") from exc
    return module


def save_checkpoint(state: TrainState, pyramid: VoxelPyramid, out_dir) -> Path:
    """Write the finished levels of ``state`` (and the pyramid) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = state.levels_done
    blobs = {"projection.safetensors": state.projection}
    for i in range(n):
        blobs[f"generator_{i}.safetensors"] = state.generators[i]
        blobs[f"decoder_{i}.safetensors"] = state.decoders[i]
    if state.discriminator is not None and n < state.num_levels:
        blobs["discriminator.safetensors"] = state.discriminator
    for name, module in blobs.items():
        _save_module(module, out / name)
    save_file({"z0_star": state.z0_star.contiguous()}, str(out / "anchor.safetensors"))
    save_file({f"level_{i}": torch.from_numpy(np.ascontiguousarray(g))
               for i, g in enumerate(pyramid.levels)}, str(out / "pyramid.safetensors"))
    stale = out / "discriminator.safetensors"
    if "discriminator.safetensors" not in blobs and stale.exists():
        stale.unlink()

    files = sorted(list(blobs) + ["anchor.safetensors", "pyramid.safetensors"])
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "levels_trained": n,
        "num_levels": state.num_levels,
        "level_dims": [list(d) for d in state.pyramid_dims],
        "sigmas": list(state.sigmas[:n]),
        "seed": state.config.seed,
        "channels": state.config.channels,
        "train_config": asdict(state.config),
        "pyramid_config": asdict(pyramid.config),
        "pyramid": {"scale_factor": pyramid.scale_factor, "finest_size": pyramid.finest_size},
        "files": {name: _digest(out / name) for name in files},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} checkpoint")
    return manifest


def load_checkpoint(path, verify: bool = True) -> tuple[TrainState, VoxelPyramid]:
    """Restore the training state and pyramid saved by ``save_checkpoint``."""
    path = Path(path)
    m = read_manifest(path)
    try:
        n = int(m["levels_trained"])
        dims = [tuple(int(s) for s in d) for d in m["level_dims"]]
        config = TrainConfig(**m["train_config"])
        pconfig = PyramidConfig(**m["pyramid_config"])
        sigmas = [float(s) for s in m["sigmas"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from exc
    if len(sigmas) != n or n > len(dims):
        raise CheckpointError(f"{path}: manifest level count does not match its sigmas/dims")
    if verify:
        for name, digest in m.get("files", {}).items():
            blob = path / name
            if not blob.exists():
                raise CheckpointError(f"{path}: missing blob {name}")
            if _digest(blob) != digest:
                raise CheckpointError(f"{path}: blob {name} does not match its digest")

    c = config.channels
    projection = _load_module(ProjectionNet(c), path / "projection.safetensors")
    generators = [_load_module(GeneratorLevel(c, has_skip_and_noise=i > 0),
                               path / f"generator_{i}.safetensors") for i in range(n)]
    decoders = [_load_module(OccupancyDecoder(c), path / f"decoder_{i}.safetensors")
                for i in range(n)]
    disc = None
    if (path / "discriminator.safetensors").exists():
        disc = _load_module(DiscriminatorNet(c), path / "discriminator.safetensors")
    try:
        z0_star = load_file(str(path / "anchor.safetensors"))["z0_star"]
        pyr = load_file(str(path / "pyramid.safetensors"))
        levels = [pyr[f"level_{i}"].numpy() for i in range(len(dims))]
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read anchor/pyramid blobs ({exc})") from exc
    for module in [projection, *generators, *decoders]:
        for p in module.parameters():
            p.requires_grad_(False)
    state = TrainState(dims, config, projection, z0_star, generators, decoders,
                       sigmas if n else [1.0], disc, n)
    pyramid = VoxelPyramid(levels, float(m["pyramid"]["scale_factor"]),
                           int(m["pyramid"]["finest_size"]), pconfig)
    return state, pyramid


def load_model(path) -> ModelStack:
    """Load a fully trained model for inference."""
    state, _ = load_checkpoint(path)
    if not state.complete:
        raise CheckpointError(f"{path}: only {state.levels_done} of {state.num_levels} levels trained")
    return state.to_stack()


@contextmanager
def train_lock(out_dir):
    """Advisory lock file preventing two trainings into one directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise TrainLockError(f"{out} is locked by another training run ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)
