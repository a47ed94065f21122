"""Conditional GANs whose discriminator is a One-Vs-All classifier.

Everything is built on a small float64 reverse-mode autodiff engine
(:mod:`ganova.autodiff`) with numpy as the only dependency.
"""

__version__ = "0.1.0"
