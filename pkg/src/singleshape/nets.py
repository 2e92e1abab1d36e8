"""Projection network, per-level tri-plane generators, patch discriminators and noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .triplane import TriPlane, plane_extents
from .voxgrid import round_half_up

POOL_SLABS = 8
RECEPTIVE_FIELD = 11


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) weights and zero biases for conv/linear layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def pool_matrix(length: int, bins: int = POOL_SLABS) -> torch.Tensor:
    """(bins, length) averaging matrix over contiguous near-equal bins.

    For ``length >= bins`` the bins partition the axis with sizes differing by at
    most one.  Shorter axes use overlapping bins [floor(i L / b), ceil((i+1) L / b)).
    """
    m = np.zeros((bins, length))
    if length >= bins:
        for i, idx in enumerate(np.array_split(np.arange(length), bins)):
            m[i, idx] = 1.0 / len(idx)
    else:
        for i in range(bins):
            lo, hi = (i * length) // bins, -((-(i + 1) * length) // bins)
            m[i, lo:hi] = 1.0 / (hi - lo)
    return torch.from_numpy(m)


class ProjectionNet(nn.Module):
    """Projects a 3D noise volume onto three feature planes.

    Along each plane's normal axis the volume is average-pooled to 8 slabs, the
    slabs become channels, and a 1x1 convolution lifts them to ``channels``.
    """

    def __init__(self, channels: int = 32, slabs: int = POOL_SLABS):
        super().__init__()
        self.slabs = slabs
        self.lift = nn.ModuleList([nn.Conv2d(slabs, channels, 1) for _ in range(3)])
        init_weights(self)

    def forward(self, z0: torch.Tensor) -> TriPlane:
        if z0.dim() != 3:
            raise ValueError(f"Z_0 must be a (D, H, W) volume, got {tuple(z0.shape)}")
        d, h, w = z0.shape
        pw, ph, pd = (pool_matrix(n, self.slabs).to(z0.dtype) for n in (w, h, d))
        slabs = (torch.einsum("sw,dhw->sdh", pw, z0),
                 torch.einsum("sh,dhw->sdw", ph, z0),
                 torch.einsum("sd,dhw->shw", pd, z0))
        return TriPlane(*(conv(s[None])[0] for conv, s in zip(self.lift, slabs)))


def project(P: ProjectionNet, z0: torch.Tensor) -> TriPlane:
    return P(z0)


def _conv_block(cin, cout, stride=1, norm=True, dims=2):
    conv = (nn.Conv2d if dims == 2 else nn.Conv3d)(cin, cout, 3, stride, 1)
    if not norm:
        return conv
    inorm = (nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d)(cout, eps=1e-5, affine=True)
    return nn.Sequential(conv, inorm, nn.LeakyReLU(0.2))


def plane_net(channels: int = 32) -> nn.Sequential:
    """Four 3x3 blocks; the last is a plain convolution."""
    return nn.Sequential(
        _conv_block(channels, channels),
        _conv_block(channels, channels),
        _conv_block(channels, channels),
        _conv_block(channels, channels, norm=False),
    )


class GeneratorLevel(nn.Module):
    """One level of the generator hierarchy: a 2D conv net per plane.

    With ``has_skip_and_noise`` the output is ``T + psi(z + T)``; the coarsest
    level computes ``psi(T)`` and takes no noise.
    """

    def __init__(self, channels: int = 32, has_skip_and_noise: bool = True):
        super().__init__()
        self.has_skip_and_noise = has_skip_and_noise
        self.psi = nn.ModuleList([plane_net(channels) for _ in range(3)])
        init_weights(self)

    def forward(self, T: TriPlane, z: TriPlane | None = None) -> TriPlane:
        if not self.has_skip_and_noise:
            return TriPlane(*(net(f[None])[0] for net, f in zip(self.psi, T)))
        if z is not None:
            for f, zp in zip(T, z):
                if f.shape[1:] != zp.shape[1:]:
                    raise ValueError(f"noise extents {tuple(zp.shape[1:])} do not match "
                                     f"tri-plane extents {tuple(f.shape[1:])}")
            inputs = [f + zp for f, zp in zip(T, z)]
        else:
            inputs = list(T)
        return TriPlane(*(f + net(x[None])[0] for net, f, x in zip(self.psi, T, inputs)))


def generator_forward(G: GeneratorLevel, T_in: TriPlane, z: TriPlane | None = None) -> TriPlane:
    return G(T_in, z)


class DiscriminatorNet(nn.Module):
    """3-layer 3D conv critic; each score sees an 11^3 input patch."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            _conv_block(1, channels, stride=2, dims=3),
            _conv_block(channels, channels, dims=3),
            nn.Conv3d(channels, 1, 3, 1, 1),
        )
        init_weights(self)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.dim() == 3:
            grid = grid[None, None]
        if min(grid.shape[-3:]) < RECEPTIVE_FIELD:
            raise ValueError(f"grid {tuple(grid.shape[-3:])} is smaller than the "
                             f"{RECEPTIVE_FIELD}^3 receptive field")
        return self.net(grid)[:, 0].squeeze(0)


def discriminator_forward(D: DiscriminatorNet, grid: torch.Tensor) -> torch.Tensor:
    return D(grid)


def score_map_dims(dims) -> tuple[int, ...]:
    return tuple(-(-int(s) // 2) for s in dims)


# ---------------------------------------------------------------------------
# noise

@dataclass
class NoiseSpec:
    """Randomness for one synthesis pass: Z_0 plus per-level plane noise for levels 1..N."""

    z0: torch.Tensor
    planes: list[TriPlane]

    @property
    def coarse_dims(self) -> tuple[int, int, int]:
        return tuple(self.z0.shape)

    def level_dims(self) -> list[tuple[int, int, int]]:
        return [self.coarse_dims] + [z.dims for z in self.planes]

    def with_z0(self, z0: torch.Tensor) -> NoiseSpec:
        return NoiseSpec(z0, self.planes)


def noise_geometry(trained_dims, coarse_dims=None) -> list[tuple[int, int, int]]:
    """Per-level extents for a Z_0 of ``coarse_dims``, scaled like the trained pyramid."""
    trained_dims = [tuple(int(s) for s in d) for d in trained_dims]
    base = trained_dims[0]
    if coarse_dims is None or tuple(coarse_dims) == base:
        return trained_dims
    coarse_dims = tuple(int(s) for s in coarse_dims)
    if len(coarse_dims) != 3 or min(coarse_dims) < 1:
        raise ValueError(f"invalid coarse dims {coarse_dims}")
    return [coarse_dims] + [
        tuple(max(1, round_half_up(t * lv / b)) for t, lv, b in zip(coarse_dims, level, base))
        for level in trained_dims[1:]
    ]


def sample_noise(trained_dims, coarse_dims, sigmas, seed: int,
                 dtype=torch.float32) -> NoiseSpec:
    """Draw Z_0 ~ N(0, sigma_0^2) and plane noise z_i ~ N(0, sigma_i^2), deterministically."""
    geometry = noise_geometry(trained_dims, coarse_dims)
    if len(sigmas) != len(geometry):
        raise ValueError(f"expected {len(geometry)} sigmas, got {len(sigmas)}")
    gen = torch.Generator().manual_seed(int(seed))
    z0 = torch.randn(geometry[0], generator=gen, dtype=dtype) * float(sigmas[0])
    planes = []
    for dims, sigma in zip(geometry[1:], sigmas[1:]):
        planes.append(TriPlane(*(torch.randn((1, *ext), generator=gen, dtype=dtype) * float(sigma)
                                 for ext in plane_extents(dims))))
    return NoiseSpec(z0, planes)


def zero_plane_noise(geometry, dtype=torch.float32) -> list[TriPlane]:
    return [TriPlane(*(torch.zeros((1, *ext), dtype=dtype) for ext in plane_extents(dims)))
            for dims in geometry[1:]]
