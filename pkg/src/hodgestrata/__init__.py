"""Numerical laboratory for Higgs bundles, Hodge and BB slices, and conformal limits."""

__version__ = "0.1.0"
