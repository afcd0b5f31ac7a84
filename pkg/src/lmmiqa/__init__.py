"""Harness for LMM-based no-reference quality assessment of low-dose CT slices."""

__version__ = "0.1.0"
