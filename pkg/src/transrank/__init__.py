"""Ranking adversarial examples by how likely they are to transfer to an unseen model."""

__version__ = "0.1.0"
