"""Embed, secure and reverse-proxy a Jupyter notebook from one process, and benchmark the result."""

__version__ = "0.1.0"
