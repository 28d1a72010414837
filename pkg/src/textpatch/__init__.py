"""Toy text-to-image diffusion with key/value patching of text conditioning."""

__version__ = "0.1.0"
