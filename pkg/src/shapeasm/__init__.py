"""Volumetric cuboid assemblies fitted to 3D shapes, per instance or with a learned encoder."""

__version__ = "0.1.0"
