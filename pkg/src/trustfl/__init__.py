"""Trusted federated learning over credential-authenticated agent channels."""

__version__ = "0.1.0"
