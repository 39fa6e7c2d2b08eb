"""Tube-loss laboratory: a small autodiff transformer trained with a
trajectory-straightening auxiliary loss, plus geometry diagnostics,
information-theoretic calculators and experiment drivers."""

__version__ = "0.1.0"
