"""Channel pruning toolkit for small CNNs.

Selects input channels layer by layer with an l1-relaxed weighted
reconstruction objective (optionally weighted by classification-loss
gradients and gated by current feature activations), refits the surviving
weights by least squares, and benchmarks the variants against
reconstruction-only and magnitude baselines.
"""

from . import harness, model_io, nn, pruner, solvers

__version__ = "0.1.0"

__all__ = ["nn", "solvers", "pruner", "model_io", "harness", "__version__"]
