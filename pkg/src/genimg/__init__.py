"""Modular generative-modelling toolkit for 2D and 3D images."""
__version__ = "0.1.0"
