"""Deepfake forensics workbench: detectors, generators, and attacks on a procedural image world."""

__version__ = "0.1.0"
