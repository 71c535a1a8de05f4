"""Desk-scale laboratory for subject personalization of a toy latent
diffusion model: synthetic image world, two-stream finetuning, and a
metric/ablation harness."""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
