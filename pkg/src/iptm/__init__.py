"""Integrated power and thermal management of a power-split HEV with multi-range speed preview."""

__version__ = "0.1.0"
