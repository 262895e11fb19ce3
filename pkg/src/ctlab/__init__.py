"""Causal transportability laboratory for discrete sequential SCMs."""

__version__ = "0.1.0"
