import math

import numpy as np
import pytest
import torch
from conftest import TINY_TRAIN, tiny_pyramid, train_tiny
from torch import nn

from singleshape.nets import DiscriminatorNet, GeneratorLevel
from singleshape.train import (
    TrainConfig,
    TrainingError,
    adversarial_losses,
    begin_scale,
    compute_sigma,
    critic_score,
    gradient_penalty,
    init_state,
    parameter_digest,
    reconstruct_level,
    reconstruction_loss,
    train_scale,
)


def zero_critic():
    D = DiscriminatorNet(4)
    with torch.no_grad():
        for p in D.parameters():
            p.zero_()
        D.net[-1].bias.fill_(0.25)
    return D


# gradient penalty

def test_constant_critic_penalty_is_one():
    D = zero_critic()
    real, fake = torch.rand(12, 12, 12), torch.rand(12, 12, 12)
    assert gradient_penalty(D, real, fake).item() == 1.0
    losses = adversarial_losses(D, real, fake, gp_weight=0.1)
    assert losses.d_loss.item() == pytest.approx(0.1)
    assert losses.g_loss.item() == pytest.approx(-0.25)


def test_mean_critic_closed_form():
    dims = (5, 6, 7)
    n = math.prod(dims)
    gp = gradient_penalty(lambda x: x, torch.rand(dims, dtype=torch.float64),
                          torch.rand(dims, dtype=torch.float64))
    assert gp.item() == pytest.approx((n ** -0.5 - 1) ** 2, rel=1e-12)


def test_equal_inputs_penalty_independent_of_eps():
    torch.manual_seed(0)
    D = DiscriminatorNet(4).double()
    x = torch.rand(12, 12, 12, dtype=torch.float64)
    ref = gradient_penalty(D, x, x, eps=0.0)
    for eps in (0.2, 0.7, 1.0):
        assert gradient_penalty(D, x, x, eps=eps).item() == pytest.approx(ref.item(), rel=1e-12)


def test_equal_inputs_cancel_scores():
    torch.manual_seed(1)
    D = DiscriminatorNet(4)
    x = torch.rand(12, 12, 12)
    rng = torch.Generator().manual_seed(3)
    losses = adversarial_losses(D, x, x, 0.1, rng)
    assert losses.d_loss.item() == pytest.approx(0.1 * losses.penalty.item(), abs=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_loss_algebraic_identity(seed):
    torch.manual_seed(seed)
    D = DiscriminatorNet(4)
    real, fake = torch.rand(12, 13, 14), torch.rand(12, 13, 14)
    L = adversarial_losses(D, real, fake, 0.1, torch.Generator().manual_seed(seed))
    total = L.d_loss + L.g_loss + L.real_score - 0.1 * L.penalty
    assert abs(total.item()) < 1e-6


class TinyCritic(nn.Module):
    """One conv on a 2^3 input, with a smooth nonlinearity so second derivatives are non-trivial."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(1, 2, 2, padding=1)

    def forward(self, x):
        return torch.tanh(self.conv(x[None, None]))


def test_penalty_second_order_gradients_match_finite_differences():
    torch.manual_seed(0)
    D = TinyCritic().double()
    with torch.no_grad():
        for p in D.parameters():
            p.normal_(0, 1.0)
    real = torch.rand(2, 2, 2, dtype=torch.float64)
    fake = torch.rand(2, 2, 2, dtype=torch.float64)
    gp = gradient_penalty(D, real, fake, eps=0.3)
    analytic = torch.autograd.grad(gp, list(D.parameters()))
    h = 1e-6
    for param, grad in zip(D.parameters(), analytic):
        flat = param.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = gradient_penalty(D, real, fake, eps=0.3).item()
            flat[k] = old - h
            down = gradient_penalty(D, real, fake, eps=0.3).item()
            flat[k] = old
            numeric = (up - down) / (2 * h)
            a = grad.view(-1)[k].item()
            assert abs(a - numeric) <= 1e-3 * max(abs(numeric), 1e-6), (k, a, numeric)


# reconstruction loss and sigma

def test_reconstruction_loss_cases(rng):
    x = torch.rand(4, 5, 6)
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(torch.full((4, 4, 4), 0.5), torch.ones(4, 4, 4)).item() == 0.25
    a, b = rng.random((4, 5, 6)), rng.random((4, 5, 6))
    oracle = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size
    got = reconstruction_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(oracle, abs=1e-6)


def test_compute_sigma_cases(rng):
    x = rng.random((6, 7, 8))
    assert compute_sigma(x, x) == 0.0
    assert compute_sigma(np.ones((4, 4, 4)), np.zeros((4, 4, 4)), 0.1) == pytest.approx(0.1)
    a, b = rng.random((6, 7, 8)), rng.random((6, 7, 8))
    rmse = math.sqrt(sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size)
    assert compute_sigma(a, b, 0.1) == pytest.approx(0.1 * rmse, abs=1e-6)
    # proportional to the reconstruction error
    assert compute_sigma(b + 0.5 * (a - b), b) == pytest.approx(0.5 * compute_sigma(a, b), rel=1e-12)
    with pytest.raises(ValueError):
        compute_sigma(np.zeros((3, 3, 3)), np.zeros((4, 3, 3)))


# training loop

def test_zero_iterations_only_bookkeeping():
    pyr = tiny_pyramid()
    cfg = TrainConfig(**{**TINY_TRAIN, "iters_per_scale": 0})
    state = init_state(pyr.dims, cfg)
    before = parameter_digest([state.projection])
    train_scale(state, 0, pyr)
    assert state.levels_done == 1
    assert parameter_digest([state.projection]) == before
    # G_0 is exactly its seeded initialization
    ref = init_state(pyr.dims, cfg)
    begin_scale(ref, 0, pyr)
    assert parameter_digest(state.generators + state.decoders) == \
        parameter_digest(ref.generators + ref.decoders)


def test_lower_levels_frozen():
    pyr = tiny_pyramid()
    cfg = TrainConfig(**TINY_TRAIN)
    state = init_state(pyr.dims, cfg)
    train_scale(state, 0, pyr)
    frozen = parameter_digest([state.projection, state.generators[0], state.decoders[0]])
    train_scale(state, 1, pyr)
    assert parameter_digest([state.projection, state.generators[0], state.decoders[0]]) == frozen
    assert len(state.sigmas) == 2 and state.sigmas[1] > 0


def test_training_deterministic():
    a, _, _ = train_tiny()
    b, _, _ = train_tiny()
    assert parameter_digest(a.modules()) == parameter_digest(b.modules())
    assert a.sigmas == b.sigmas
    assert torch.equal(a.z0_star, b.z0_star)


def test_all_levels_trained(tiny_model):
    stack, state, pyr = tiny_model
    assert stack.num_levels == len(pyr.levels) == 3
    assert len(stack.generators) == len(stack.decoders) == len(stack.sigmas) == 3
    assert stack.sigmas[0] == 1.0
    assert all(math.isfinite(r[k]) for r in state.history for k in ("d_loss", "g_loss", "rec_loss"))
    assert not stack.generators[0].has_skip_and_noise and stack.generators[1].has_skip_and_noise


def test_non_finite_loss_raises():
    pyr = tiny_pyramid()
    state = init_state(pyr.dims, TrainConfig(**TINY_TRAIN))
    with torch.no_grad():
        state.projection.lift[0].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="level 0, iteration 0"):
        train_scale(state, 0, pyr)


def test_out_of_order_level_rejected():
    pyr = tiny_pyramid()
    state = init_state(pyr.dims, TrainConfig(**TINY_TRAIN))
    with pytest.raises(TrainingError):
        train_scale(state, 1, pyr)


@pytest.mark.slow
def test_level0_reconstruction_improves_tenfold():
    pyr = tiny_pyramid()
    cfg = TrainConfig(**{**TINY_TRAIN, "iters_per_scale": 150, "channels": 32, "log_every": 149})
    state = init_state(pyr.dims, cfg)
    train_scale(state, 0, pyr)
    first, last = state.history[0]["rec_loss"], state.history[-1]["rec_loss"]
    assert first / last >= 10, (first, last)
    rec = reconstruct_level(state, 0)
    assert ((rec - pyr[0]) ** 2).mean() == pytest.approx(last, rel=0.5)


def test_critic_score_is_mean():
    D = DiscriminatorNet(4)
    x = torch.rand(12, 12, 12)
    assert critic_score(D, x).item() == pytest.approx(D(x).mean().item())


def test_generator_fresh_each_level(tiny_model):
    stack, _, _ = tiny_model
    assert isinstance(stack.generators[1], GeneratorLevel)
    assert stack.generators[1] is not stack.generators[2]
