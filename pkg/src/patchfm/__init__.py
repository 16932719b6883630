"""Desk-scale patch-Transformer time-series forecaster.

Self-contained: a float64 autodiff tensor engine, mask-aware preprocessing
with contiguous patch masking, an encoder-only patch Transformer with a
quantile head, masked pinball-loss training, KernelSynth/TSMixup synthetic
data, and a Seasonal-Naive-normalized MASE/CRPS evaluation harness.
"""

__version__ = "0.1.0"
