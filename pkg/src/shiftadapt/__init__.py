"""Distribution-shift measurement and alpha-weighted adaptation for tabular data."""

__version__ = "0.1.0"
