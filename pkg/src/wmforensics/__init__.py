"""Proactive face watermarking: ownership verification, tamper localization and content recovery."""

__version__ = "0.1.0"
