"""Gridded transformer neural processes on a small numpy autodiff engine.

Subpackages, roughly in dependency order:

- ``tensor``: reverse-mode autodiff over numpy arrays, gradient checking.
- ``nn``: parameter containers, linear/MLP/layer-norm layers, checkpoints.
- ``geomembed``: Fourier time embeddings, spherical harmonics, haversine.
- ``gridenc``: grid specs, nearest-cell assignment, the three grid encoders.
- ``attnproc``: attention blocks plus the ViT and Swin grid processors.
- ``griddec``: lattice neighbour search and (nearest-neighbour) cross-attention
  grid decoding.
- ``models``: CNP, pseudo-token TNP, and gridded TNP assemblies with the
  Gaussian likelihood head and training loss.
- ``taskgen``: exact Gaussian-process task samplers, the posterior oracle,
  and task (de)serialization.
- ``harness``: AdamW, the training/evaluation loops, metrics and plots.
"""

__version__ = "0.1.0"
