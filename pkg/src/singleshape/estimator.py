"""scikit-learn style wrapper around pyramid construction, training and sampling."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import sampler
from .train import TrainConfig, init_state, train_all
from .voxgrid import PyramidConfig, build_pyramid


class SingleShapeGAN(BaseEstimator):
    """Learns a generative model from one shape.

    ``fit`` takes an occupancy grid (D, H, W) or a :class:`~singleshape.objfile.Mesh`.
    Fitted attributes: ``pyramid_``, ``state_`` (training state), ``model_`` (frozen
    :class:`ModelStack`), ``history_`` (logged loss records).
    """

    def __init__(self, scale_factor=0.75, num_scales="auto", min_dim=15, blur_sigma=0.5,
                 finest_size=128, alpha=10.0, gp_weight=0.1, iters_per_scale=2000, d_steps=3,
                 g_steps=3, lr=1e-4, adam_beta1=0.5, adam_beta2=0.999, sigma_hat=0.1,
                 channels=32, log_every=100, random_state=0):
        self.scale_factor = scale_factor
        self.num_scales = num_scales
        self.min_dim = min_dim
        self.blur_sigma = blur_sigma
        self.finest_size = finest_size
        self.alpha = alpha
        self.gp_weight = gp_weight
        self.iters_per_scale = iters_per_scale
        self.d_steps = d_steps
        self.g_steps = g_steps
        self.lr = lr
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.sigma_hat = sigma_hat
        self.channels = channels
        self.log_every = log_every
        self.random_state = random_state

    def pyramid_config(self) -> PyramidConfig:
        cfg = PyramidConfig(self.scale_factor, self.min_dim, self.blur_sigma, self.num_scales,
                            self.finest_size)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(alpha=self.alpha, gp_weight=self.gp_weight,
                          iters_per_scale=self.iters_per_scale, d_steps=self.d_steps,
                          g_steps=self.g_steps, lr=self.lr, adam_beta1=self.adam_beta1,
                          adam_beta2=self.adam_beta2, sigma_hat=self.sigma_hat,
                          seed=int(self.random_state), channels=self.channels,
                          log_every=self.log_every)
        cfg.validate()
        return cfg

    def fit(self, X, y=None, callback=None):
        tcfg = self.train_config()
        self.pyramid_ = build_pyramid(X, self.pyramid_config())
        self.state_ = init_state(self.pyramid_.dims, tcfg)
        self.model_ = train_all(self.pyramid_, tcfg, self.state_, callback=callback)
        self.history_ = list(self.state_.history)
        return self

    def sample(self, n_samples=1, seed=0, coarse_dims=None, upsample=1, binarize=False):
        """List of ``n_samples`` grids; sample ``k`` uses seed ``seed + k``."""
        check_is_fitted(self, "model_")
        return [sampler.generate(self.model_, sampler.GenerationRequest(
                    coarse_dims=coarse_dims, upsample=upsample, seed=seed + k, binarize=binarize))
                for k in range(n_samples)]

    def reconstruct(self, upsample=1, binarize=False) -> np.ndarray:
        check_is_fitted(self, "model_")
        return sampler.reconstruct(self.model_, upsample, binarize=binarize)

    def interpolate(self, seed_a, seed_b, alphas, fixed_noise="zeros"):
        check_is_fitted(self, "model_")
        return [sampler.interpolate(self.model_, seed_a, seed_b, a, fixed_noise) for a in alphas]
