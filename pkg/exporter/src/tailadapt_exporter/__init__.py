"""Offline embedding exporter for tailadapt datasets."""

__version__ = "0.1.0"

from .encoders import ClipEncoder, ToyEncoder, resolve_encoder
from .export import ExportSpec, export

__all__ = ["ClipEncoder", "ExportSpec", "ToyEncoder", "export", "resolve_encoder"]
