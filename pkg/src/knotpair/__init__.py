"""Pairing of wood knots seen on different surfaces of the same board."""

__version__ = "0.1.0"
