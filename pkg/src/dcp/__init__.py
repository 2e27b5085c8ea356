"""Deeply coupled cross-modal prompt learning at desk scale."""

__version__ = "0.1.0"
