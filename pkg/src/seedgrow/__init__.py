"""Automatic seed-point detection and constrained volume growing for DCE-MRI
response monitoring."""

__version__ = "0.1.0"
