"""Non-parallel voice conversion with a one-way GAN and patch contrastive losses."""

__version__ = "0.1.0"
