"""Doubly sparse spatiotemporal Gaussian-process reconstruction of climate fields."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"


class InvalidInput(ValueError):
    """Raised for malformed or out-of-domain inputs."""


class NumericalFailure(ArithmeticError):
    """Raised when a factorization or recursion loses positive definiteness."""
