"""Stochastic Ladyzhenskaya-Smagorinsky flows on a periodic box."""

__version__ = "0.1.0"
