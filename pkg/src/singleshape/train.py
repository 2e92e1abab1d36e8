"""Progressive coarse-to-fine adversarial training of the generator hierarchy."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .nets import (
    DiscriminatorNet,
    GeneratorLevel,
    ProjectionNet,
    TriPlane,
    zero_plane_noise,
)
from .sampler import ModelStack, cascade_planes
from .triplane import OccupancyDecoder, decode_grid, plane_extents, upsample_triplane
from .voxgrid import VoxelPyramid, resize_trilinear

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 10.0            # reconstruction weight
    gp_weight: float = 0.1
    iters_per_scale: int = 2000
    d_steps: int = 3
    g_steps: int = 3
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    sigma_hat: float = 0.1
    seed: int = 0
    channels: int = 32
    log_every: int = 100

    def validate(self) -> None:
        for name in ("alpha", "gp_weight", "lr", "sigma_hat"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("d_steps", "g_steps", "channels", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iters_per_scale < 0:
            raise ValueError(f"iters_per_scale must be >= 0, got {self.iters_per_scale}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


# ---------------------------------------------------------------------------
# objective

def critic_score(D: Callable, grid: torch.Tensor) -> torch.Tensor:
    """Final critic score: the mean of the patch score map."""
    return D(grid).mean()


def gradient_penalty(D: Callable, real: torch.Tensor, fake: torch.Tensor,
                     rng: torch.Generator | None = None, eps: float | None = None) -> torch.Tensor:
    """WGAN-GP term (||grad_xhat s(xhat)||_2 - 1)^2 on a random real/fake blend.

    Built with ``create_graph`` so the result can be differentiated with
    respect to the critic's parameters.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if eps is None:
        eps = torch.rand((), generator=rng, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = critic_score(D, x_hat)
    (grad,) = torch.autograd.grad(score, x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    return (grad.flatten().norm(2) - 1.0) ** 2


class AdversarialLosses(NamedTuple):
    d_loss: torch.Tensor
    g_loss: torch.Tensor
    real_score: torch.Tensor
    fake_score: torch.Tensor
    penalty: torch.Tensor


def adversarial_losses(D: Callable, real: torch.Tensor, fake: torch.Tensor,
                       gp_weight: float = 0.1, rng: torch.Generator | None = None) -> AdversarialLosses:
    """Critic and generator WGAN-GP losses for one real/fake pair."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    s_real = critic_score(D, real)
    s_fake = critic_score(D, fake)
    gp = gradient_penalty(D, real, fake, rng)
    return AdversarialLosses(s_fake - s_real + gp_weight * gp, -s_fake, s_real, s_fake, gp)


def reconstruction_loss(reconstructed: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over cells."""
    if reconstructed.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(target.shape)}")
    return ((reconstructed - target) ** 2).mean()


def compute_sigma(x_rec_prev, x_i, sigma_hat: float = 0.1) -> float:
    """Noise std for a level: sigma_hat times the RMSE of the upsampled coarser reconstruction."""
    a = np.asarray(x_rec_prev, dtype=np.float64)
    b = np.asarray(x_i, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"reconstruction {a.shape} and target {b.shape} differ; upsample first")
    return float(sigma_hat * np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    """Mutable training state; ``levels_done`` levels are finished and frozen."""

    pyramid_dims: list[tuple[int, int, int]]
    config: TrainConfig
    projection: ProjectionNet
    z0_star: torch.Tensor
    generators: list[GeneratorLevel] = field(default_factory=list)
    decoders: list[OccupancyDecoder] = field(default_factory=list)
    sigmas: list[float] = field(default_factory=lambda: [1.0])
    discriminator: DiscriminatorNet | None = None
    levels_done: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.pyramid_dims)

    @property
    def complete(self) -> bool:
        return self.levels_done == self.num_levels

    def to_stack(self) -> ModelStack:
        if self.levels_done < 1:
            raise TrainingError("no trained levels")
        n = self.levels_done
        return ModelStack(
            projection=self.projection,
            generators=self.generators[:n],
            decoders=self.decoders[:n],
            sigmas=list(self.sigmas[:n]),
            z0_star=self.z0_star,
            pyramid_dims=list(self.pyramid_dims[:n]),
            config=asdict(self.config),
        ).freeze()


def _seed_for(seed: int, level: int, stream: int) -> int:
    return (int(seed) * 1_000_003 + level * 101 + stream) % (2 ** 63)


def init_state(pyramid_dims, config: TrainConfig | None = None) -> TrainState:
    config = config or TrainConfig()
    config.validate()
    torch.manual_seed(_seed_for(config.seed, 0, 0))
    projection = ProjectionNet(config.channels)
    gen = torch.Generator().manual_seed(_seed_for(config.seed, 0, 1))
    z0_star = torch.randn(tuple(pyramid_dims[0]), generator=gen)
    return TrainState([tuple(int(s) for s in d) for d in pyramid_dims], config, projection, z0_star)


def parameter_digest(modules) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _set_trainable(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _reconstruction_prefix(state: TrainState, level: int) -> TriPlane | None:
    """Frozen reconstruction tri-plane of level ``level - 1`` (None for level 0)."""
    if level == 0:
        return None
    geometry = state.pyramid_dims[:level]
    with torch.no_grad():
        return cascade_planes(state.projection, state.generators[:level], state.z0_star,
                              zero_plane_noise(geometry), geometry)


def reconstruct_level(state: TrainState, level: int) -> np.ndarray:
    """Decoded reconstruction x~*_level with the anchor noise {Z_0*, 0, ..., 0}."""
    geometry = state.pyramid_dims[:level + 1]
    with torch.no_grad():
        T = cascade_planes(state.projection, state.generators[:level + 1], state.z0_star,
                           zero_plane_noise(geometry), geometry)
        return decode_grid(T, state.decoders[level]).numpy()


def begin_scale(state: TrainState, level: int, pyramid: VoxelPyramid) -> None:
    """Create the modules for ``level`` (reusing the previous decoder and critic) and set its sigma."""
    if level != state.levels_done:
        raise TrainingError(f"level {level} requested but {state.levels_done} levels are done")
    if len(state.generators) > level:
        return  # already set up (resumed mid-bookkeeping)
    cfg = state.config
    torch.manual_seed(_seed_for(cfg.seed, level, 2))
    state.generators.append(GeneratorLevel(cfg.channels, has_skip_and_noise=level > 0))
    if level == 0:
        state.decoders.append(OccupancyDecoder(cfg.channels))
        state.discriminator = DiscriminatorNet(cfg.channels)
    else:
        state.decoders.append(copy.deepcopy(state.decoders[level - 1]))
        if state.discriminator is None:
            state.discriminator = DiscriminatorNet(cfg.channels)
        rec_prev = reconstruct_level(state, level - 1)
        up = resize_trilinear(rec_prev, state.pyramid_dims[level])
        state.sigmas.append(compute_sigma(up, pyramid[level], cfg.sigma_hat))
    _set_trainable(state.decoders[level], True)
    _set_trainable(state.generators[level], True)


def _random_fake(state: TrainState, level: int, gen: torch.Generator) -> torch.Tensor:
    """Decoded sample at ``level`` from fresh noise; frozen levels run without grad."""
    dims = state.pyramid_dims
    z0 = torch.randn(dims[0], generator=gen) * state.sigmas[0]
    noise = [TriPlane(*(torch.randn((1, *ext), generator=gen) * state.sigmas[j]
                        for ext in plane_extents(dims[j])))
             for j in range(1, level + 1)]
    if level == 0:
        T = state.generators[0](state.projection(z0))
    else:
        with torch.no_grad():
            T = cascade_planes(state.projection, state.generators[:level], z0,
                               noise[:level - 1], dims[:level])
        T = state.generators[level](upsample_triplane(T, dims[level]), noise[level - 1])
    return decode_grid(T, state.decoders[level])


def train_scale(state: TrainState, level: int, pyramid: VoxelPyramid,
                callback: Callable[[dict], None] | None = None) -> TrainState:
    """Train one level for ``iters_per_scale`` iterations, then freeze it."""
    cfg = state.config
    begin_scale(state, level, pyramid)
    G, M, D = state.generators[level], state.decoders[level], state.discriminator
    for m in state.generators[:level] + state.decoders[:level]:
        _set_trainable(m, False)
    _set_trainable(state.projection, level == 0)

    real = torch.as_tensor(pyramid[level], dtype=torch.float32)
    if tuple(real.shape) != state.pyramid_dims[level]:
        raise TrainingError(f"pyramid level {level} has dims {tuple(real.shape)}, "
                            f"expected {state.pyramid_dims[level]}")
    g_params = list(G.parameters()) + list(M.parameters())
    if level == 0:
        g_params += list(state.projection.parameters())
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=betas)
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=betas)
    gen = torch.Generator().manual_seed(_seed_for(cfg.seed, level, 3))
    rec_prefix = _reconstruction_prefix(state, level)

    def reconstruction():
        if level == 0:
            T = G(state.projection(state.z0_star))
        else:
            T = G(upsample_triplane(rec_prefix, state.pyramid_dims[level]))
        return reconstruction_loss(decode_grid(T, M), real)

    for it in range(cfg.iters_per_scale):
        _set_trainable(D, True)
        for _ in range(cfg.d_steps):
            with torch.no_grad():
                fake = _random_fake(state, level, gen)
            losses = adversarial_losses(D, real, fake, cfg.gp_weight, gen)
            opt_d.zero_grad(set_to_none=True)
            losses.d_loss.backward()
            opt_d.step()
        _set_trainable(D, False)
        for _ in range(cfg.g_steps):
            fake = _random_fake(state, level, gen)
            g_adv = -critic_score(D, fake)
            rec = reconstruction()
            g_total = g_adv + cfg.alpha * rec
            opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            opt_g.step()

        values = (losses.d_loss.item(), g_adv.item(), rec.item())
        if not all(math.isfinite(v) for v in values):
            raise TrainingError(f"non-finite loss at level {level}, iteration {it}: "
                                f"d_loss={values[0]}, g_loss={values[1]}, rec_loss={values[2]}")
        if it % cfg.log_every == 0 or it == cfg.iters_per_scale - 1:
            record = {"level": level, "iter": it, "d_loss": values[0],
                      "g_loss": values[1], "rec_loss": values[2]}
            state.history.append(record)
            log.info("level %d iter %d d_loss %.5f g_loss %.5f rec_loss %.6f", level, it, *values)
            if callback is not None:
                callback(record)

    _set_trainable(G, False)
    _set_trainable(M, False)
    _set_trainable(state.projection, False)
    state.levels_done = level + 1
    return state


def train_all(pyramid: VoxelPyramid, config: TrainConfig | None = None,
              state: TrainState | None = None,
              on_scale_end: Callable[[TrainState], None] | None = None,
              callback: Callable[[dict], None] | None = None) -> ModelStack:
    """Train every level coarse to fine; pass ``state`` to resume after a finished level."""
    if state is None:
        state = init_state(pyramid.dims, config)
    elif [tuple(d) for d in state.pyramid_dims] != pyramid.dims:
        raise TrainingError("resume state does not match the pyramid dims")
    for level in range(state.levels_done, state.num_levels):
        train_scale(state, level, pyramid, callback)
        if on_scale_end is not None:
            on_scale_end(state)
    return state.to_stack()
