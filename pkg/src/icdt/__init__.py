"""Image-conditional diffusion transformer for underwater image enhancement.

Submodules:

- ``tensor``: a small reverse-mode autodiff engine over numpy arrays
- ``diffusion``: noise schedules, posteriors, losses and respacing
- ``model``: the adaLN transformer denoiser and its size/FLOP bookkeeping
- ``codec``: image <-> latent codecs
- ``engine``: training step, sampler, trainer and checkpoints
- ``metrics``: PSNR, SSIM, UIQM
- ``cli``: the ``icdt`` command
"""

__version__ = "0.1.0"
