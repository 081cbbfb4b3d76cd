"""Cross-domain face retargeting at desk scale on a procedural face dataset."""

__version__ = "0.1.0"
