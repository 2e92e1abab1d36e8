"""Inference: run the generator cascade and decode shapes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .nets import (
    GeneratorLevel,
    NoiseSpec,
    ProjectionNet,
    noise_geometry,
    sample_noise,
    zero_plane_noise,
)
from .triplane import OccupancyDecoder, TriPlane, decode_grid, upsample_triplane


class NotTrainedError(RuntimeError):
    """The model stack has no trained levels."""


@dataclass
class ModelStack:
    """Trained projection, per-level generators and decoders, noise stds and the anchor noise."""

    projection: ProjectionNet
    generators: list[GeneratorLevel]
    decoders: list[OccupancyDecoder]
    sigmas: list[float]
    z0_star: torch.Tensor
    pyramid_dims: list[tuple[int, int, int]]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.generators)
        if not (len(self.decoders) == len(self.sigmas) == len(self.pyramid_dims) == n):
            raise ValueError("level counts differ across generators, decoders, sigmas and dims")
        if n and self.sigmas[0] != 1.0:
            raise ValueError("sigma_0 must be 1.0")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise stds must be non-negative")

    @property
    def num_levels(self) -> int:
        return len(self.generators)

    @property
    def coarse_dims(self) -> tuple[int, int, int]:
        return tuple(self.pyramid_dims[0])

    @property
    def finest_dims(self) -> tuple[int, int, int]:
        return tuple(self.pyramid_dims[-1])

    def modules(self):
        return [self.projection, *self.generators, *self.decoders]

    def freeze(self) -> ModelStack:
        for m in self.modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return self


def cascade_planes(P: ProjectionNet, generators, z0: torch.Tensor,
                   plane_noise, geometry) -> TriPlane:
    """T_0 = G_0(P(Z_0)); T_{i+1} = G_{i+1}(up(T_i), z_{i+1}); returns the last tri-plane."""
    if len(plane_noise) < len(generators) - 1:
        raise ValueError("not enough plane-noise levels for the cascade")
    T = generators[0](P(z0))
    for i in range(1, len(generators)):
        dims = tuple(geometry[i])
        if plane_noise[i - 1] is not None and plane_noise[i - 1].dims != dims:
            raise ValueError(f"level {i} noise extents {plane_noise[i - 1].dims} do not match {dims}")
        T = generators[i](upsample_triplane(T, dims), plane_noise[i - 1])
    return T


def _check_trained(stack) -> None:
    if stack is None or getattr(stack, "num_levels", 0) < 1:
        raise NotTrainedError("model stack has no trained levels")


def cascade(stack: ModelStack, noise: NoiseSpec) -> TriPlane:
    """Finest-level tri-plane for a noise specification."""
    _check_trained(stack)
    geometry = noise.level_dims()
    if len(geometry) != stack.num_levels:
        raise ValueError(f"noise has {len(geometry)} levels, model has {stack.num_levels}")
    with torch.no_grad():
        return cascade_planes(stack.projection, stack.generators, noise.z0, noise.planes, geometry)


@dataclass
class GenerationRequest:
    coarse_dims: tuple[int, int, int] | None = None
    upsample: int = 1
    output_dims: tuple[int, int, int] | None = None
    seed: int = 0
    binarize: bool = False

    def validate(self) -> None:
        if self.coarse_dims is not None and min(self.coarse_dims) < 1:
            raise ValueError(f"coarse dims must be >= 1, got {self.coarse_dims}")
        if self.upsample < 1:
            raise ValueError(f"upsample multiplier must be >= 1, got {self.upsample}")
        if self.output_dims is not None and min(self.output_dims) < 1:
            raise ValueError(f"output dims must be >= 1, got {self.output_dims}")


def output_dims_for(finest_dims, upsample: int = 1, output_dims=None) -> tuple[int, int, int]:
    if output_dims is not None:
        return tuple(int(s) for s in output_dims)
    return tuple(int(s) * int(upsample) for s in finest_dims)


def synthesize(stack: ModelStack, noise: NoiseSpec, upsample: int = 1, output_dims=None,
               binarize: bool = False) -> np.ndarray:
    """Decode the shape produced by ``noise`` with the finest decoder."""
    T = cascade(stack, noise)
    dims = output_dims_for(T.dims, upsample, output_dims)
    with torch.no_grad():
        grid = decode_grid(T, stack.decoders[-1], dims).numpy().astype(np.float32)
    return (grid >= 0.5).astype(np.float32) if binarize else grid


def draw_noise(stack: ModelStack, seed: int, coarse_dims=None) -> NoiseSpec:
    _check_trained(stack)
    return sample_noise(stack.pyramid_dims, coarse_dims, stack.sigmas, seed)


def generate(stack: ModelStack, request: GenerationRequest | None = None) -> np.ndarray:
    """Random shape for the request's seed, size and output resolution."""
    _check_trained(stack)
    request = request or GenerationRequest()
    request.validate()
    noise = draw_noise(stack, request.seed, request.coarse_dims)
    return synthesize(stack, noise, request.upsample, request.output_dims, request.binarize)


def anchor_noise(stack: ModelStack) -> NoiseSpec:
    """{Z_0*, 0, ..., 0}: the noise that reproduces the training shape."""
    _check_trained(stack)
    return NoiseSpec(stack.z0_star, zero_plane_noise(stack.pyramid_dims))


def reconstruct(stack: ModelStack, upsample: int = 1, output_dims=None,
                binarize: bool = False) -> np.ndarray:
    return synthesize(stack, anchor_noise(stack), upsample, output_dims, binarize)


def interpolation_noise(stack: ModelStack, seed_a: int, seed_b: int, alpha: float,
                        fixed_noise: str | int = "zeros", coarse_dims=None) -> NoiseSpec:
    """Z_0 blended as (1 - alpha) Z_a + alpha Z_b; plane noise held fixed.

    ``fixed_noise`` is ``"zeros"`` or an integer seed for a drawn plane-noise sample.
    """
    z_a = draw_noise(stack, seed_a, coarse_dims).z0
    z_b = draw_noise(stack, seed_b, coarse_dims).z0
    if fixed_noise == "zeros":
        planes = zero_plane_noise(noise_geometry(stack.pyramid_dims, coarse_dims))
    else:
        planes = draw_noise(stack, int(fixed_noise), coarse_dims).planes
    alpha = float(alpha)
    return NoiseSpec((1.0 - alpha) * z_a + alpha * z_b, planes)


def interpolate(stack: ModelStack, seed_a: int, seed_b: int, alpha: float,
                fixed_noise: str | int = "zeros", coarse_dims=None, upsample: int = 1,
                binarize: bool = False) -> np.ndarray:
    noise = interpolation_noise(stack, seed_a, seed_b, alpha, fixed_noise, coarse_dims)
    return synthesize(stack, noise, upsample, binarize=binarize)


def fixed_noise_endpoint(stack: ModelStack, seed: int, fixed_noise: str | int = "zeros",
                         coarse_dims=None) -> NoiseSpec:
    """Noise for generating ``seed``'s Z_0 under the interpolation's fixed plane noise."""
    ref = interpolation_noise(stack, seed, seed, 0.0, fixed_noise, coarse_dims)
    return NoiseSpec(draw_noise(stack, seed, coarse_dims).z0, ref.planes)
