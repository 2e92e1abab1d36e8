"""Multi-scale tri-plane GAN that learns to synthesize variations of a single 3D shape."""

__version__ = "0.1.0"

from .estimator import SingleShapeGAN
from .sampler import GenerationRequest, ModelStack, NotTrainedError
from .train import TrainConfig, TrainingError
from .triplane import TriPlane
from .voxgrid import PyramidConfig, VoxelPyramid, build_pyramid, load_grid, save_grid

__all__ = [
    "GenerationRequest",
    "ModelStack",
    "NotTrainedError",
    "PyramidConfig",
    "SingleShapeGAN",
    "TrainConfig",
    "TrainingError",
    "TriPlane",
    "VoxelPyramid",
    "__version__",
    "build_pyramid",
    "load_grid",
    "save_grid",
]
