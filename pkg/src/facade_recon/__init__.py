"""Graph-attention reconstruction of façade wind-pressure fields from sparse sensors."""

__version__ = "0.1.0"
