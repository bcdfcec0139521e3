"""Fingerprint-conditioned streaming speech enhancement on numpy."""

__version__ = "0.1.0"
