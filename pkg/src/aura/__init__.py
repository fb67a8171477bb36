"""Hybrid spatiotemporal-chromatic smoke plume detection."""

__version__ = "0.1.0"
