"""Desk-scale laboratory for gradient-utility token reweighting on a tiny LM.

Everything runs in float64 numpy on CPU and is bit-reproducible from a
single seed: a handwritten transformer with exact gradients, a probing
estimator for per-token gradient utilities, Gibbs reweighting under a KL
constraint with variance-controlled scaling, baseline weighting strategies,
a synthetic modular-arithmetic chain-of-thought corpus, and a training loop
with checkpoints and step diagnostics.
"""

__version__ = "0.1.0"
