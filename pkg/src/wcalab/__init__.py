"""Stochastic classifiers with learned anisotropic Gaussian noise, the
attacks used to evaluate them, and the Gaussian gap bound."""

__version__ = "0.1.0"
