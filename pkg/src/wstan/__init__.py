"""Weakly supervised temporal grounding with a temporal adjacent network."""

__version__ = "0.1.0"
