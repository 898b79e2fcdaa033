"""Identity-anchored personalization of a miniature diffusion model.

A self-contained numpy implementation: a small reverse-mode tensor core,
a synthetic embedding world standing in for text and image encoders, an
identity-token enhancer, a gated context adapter, a toy latent denoiser
with cross-attention conditioning, and the training and evaluation
harness that ties them together.
"""

from .autodiff import (
    ContractError,
    NumericError,
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    backward,
    constant,
)

__all__ = [
    "ContractError",
    "NumericError",
    "Parameter",
    "Rng",
    "ShapeError",
    "Tensor",
    "backward",
    "constant",
]

__version__ = "0.1.0"
