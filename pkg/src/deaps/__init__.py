"""DEAPS: non-contrastive self-supervised learning for quasiperiodic time series."""

__version__ = "0.1.0"
