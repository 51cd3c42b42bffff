"""Unsupervised image anomaly detection with false-alarm control."""

__version__ = "0.1.0"

from .numerics import (
    LogProb,
    SpectralDecomposition,
    binomial_tail,
    chi2_isf,
    chi2_sf,
    symmetric_eig,
)

__all__ = [
    "LogProb",
    "SpectralDecomposition",
    "binomial_tail",
    "chi2_isf",
    "chi2_sf",
    "symmetric_eig",
    "__version__",
]
