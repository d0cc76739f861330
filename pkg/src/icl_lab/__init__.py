"""icl-lab: one-layer softmax attention as an in-context nearest-neighbors
regressor, with a training lab, bandwidth sweeps, and numerical bound checks."""

__version__ = "0.1.0"
