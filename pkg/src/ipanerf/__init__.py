"""Illusory poisoning attack against neural radiance fields."""

__version__ = "0.1.0"
