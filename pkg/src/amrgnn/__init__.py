"""Multiscale graph-transformer surrogate for phase-field fracture on adaptively refined quadtree meshes."""

__version__ = "0.1.0"
