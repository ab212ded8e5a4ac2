"""Prototype-based novel class discovery for anomaly data, with
anomaly-map-guided attention and a vMF prototype head."""

__version__ = "0.1.0"
