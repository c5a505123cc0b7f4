"""Exact desk-scale laboratory for trust-region error bounds in autoregressive policy optimization."""

__version__ = "0.1.0"
