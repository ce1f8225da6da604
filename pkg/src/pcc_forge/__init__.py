"""Point-Text-Image corpus tooling, position-aware fusion and completion metrics."""

__version__ = "0.1.0"
FORMAT_VERSION = "pcc-forge/1"
