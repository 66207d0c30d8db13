"""Spoiler detection with a dependency-relation-aware graph network."""

__version__ = "0.1.0"
