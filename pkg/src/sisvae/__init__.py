"""Smoothness-inducing sequential VAE for multivariate time-series anomaly detection.

Modules: ``diffcore`` (reverse-mode autodiff), ``nets`` (GRU/VAE components),
``objective`` (losses), ``training``, ``scoring``, ``evalkit`` (metrics),
``datagen`` (synthetic data and CSV) and ``cli``.
"""

__version__ = "0.1.0"
