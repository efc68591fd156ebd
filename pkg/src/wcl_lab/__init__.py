"""Numerical laboratory for weak coupling limits of Pauli-Fierz models."""

__version__ = "0.1.0"
