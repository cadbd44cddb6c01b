"""Storyline bookmark memory for role-playing action prediction."""

__version__ = "0.1.0"
