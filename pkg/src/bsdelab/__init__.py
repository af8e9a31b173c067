"""Numerical laboratory for BSDEs driven by continuous martingales."""
__version__ = "0.1.0"
