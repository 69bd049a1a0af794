"""Rotation-invariant, structure-aware part-based descriptors for fine-grained 3D shape retrieval."""

__version__ = "0.1.0"
