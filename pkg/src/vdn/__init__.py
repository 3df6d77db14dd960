"""Variational disentanglement for domain generalisation, at desk scale."""

__version__ = "0.1.0"
