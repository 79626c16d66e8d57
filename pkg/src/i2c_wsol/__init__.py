"""Weakly supervised object localization with cross-image seed consistency."""

__version__ = "0.1.0"
