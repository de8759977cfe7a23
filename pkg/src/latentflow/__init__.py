"""latentflow: a latent flow-matching neural PDE solver, end to end on CPU.

The pieces compose bottom-up: a numpy-backed autodiff tensor core
(`tensor`, `conv`, `nn`, `optim`), diffusion-path schedules and reverse
integrators (`schedules`, `samplers`), the mesh-agnostic autoencoder
(`meshcodec`), the factorized-attention velocity predictor (`denoiser`),
toy PDE data (`pdelab`), training/rollout (`forecast`), and metrics
(`diagnostics`). `cli` ties them into one config-driven command.
"""

from ._kernels import BACKEND as kernel_backend
from .schedules import DiffusionPath, TimeGrid, make_grid
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "DiffusionPath",
    "TimeGrid",
    "make_grid",
    "kernel_backend",
    "__version__",
]
