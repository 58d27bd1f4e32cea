"""Learned anisotropic diffusion for image denoising via pixel-wise actor-critic RL."""
