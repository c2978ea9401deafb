"""Desk-scale engine for constraint-fused vector search, data/feature preparation,
versioned model artifacts, drift monitoring and declarative task execution."""

__version__ = "0.1.0"
