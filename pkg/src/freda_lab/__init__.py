"""Frequency-clustered decentralized test-time adaptation on synthetic streams."""

__version__ = "0.1.0"
