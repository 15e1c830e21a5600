"""Meta-learning for GANs: pluggable Reptile/MAML inner loops over a small autodiff core."""

__version__ = "0.1.0"
