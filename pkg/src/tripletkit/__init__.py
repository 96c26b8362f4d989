"""Metric-embedding learning toolkit: triplet-loss variants with analytic
gradients, PK batch sampling, a small MLP trained by hand-derived backprop,
and a camera-aware retrieval evaluation protocol."""

__version__ = "0.1.0"
