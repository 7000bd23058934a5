"""Hierarchical latent-variable dialogue models (RNNLM, HRED, VHRED) on a numpy autodiff core."""

__version__ = "0.1.0"
