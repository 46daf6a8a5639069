"""Lightweight volumetric segmentation network with grouped state-space mixing,
a cross-scale gated skip bridge, and sample-level expert routing."""

from m4fuse.network import M4Fuse, NetworkConfig, build, param_report

__all__ = ["M4Fuse", "NetworkConfig", "build", "param_report"]
__version__ = "0.1.0"
