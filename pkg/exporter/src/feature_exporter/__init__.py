"""Offline feature exporter for the reconstruction pipeline's file provider."""

__version__ = "0.1.0"

from .exporter import ExportManifest, ShapeDriftError, export
from .backbone import BackboneUnavailable, StubBackbone, VARIANTS, load_backbone

__all__ = [
    "ExportManifest",
    "ShapeDriftError",
    "export",
    "BackboneUnavailable",
    "StubBackbone",
    "VARIANTS",
    "load_backbone",
    "__version__",
]
