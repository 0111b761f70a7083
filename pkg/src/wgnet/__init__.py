"""Coupled inverse-forward graph learning for guided-wave damage localization."""

__version__ = "0.1.0"
