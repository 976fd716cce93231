"""Desk-scale SimCSE training and STS evaluation on a numpy autograd core."""

__version__ = "0.1.0"
