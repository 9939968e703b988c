"""Desk-scale multi-modal occupancy prediction toolkit."""
__version__ = "0.1.0"
