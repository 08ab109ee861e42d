"""Multi-domain defect synthesis GAN with a foreground/background bottleneck split."""

__version__ = "0.1.0"
