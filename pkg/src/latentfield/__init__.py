"""Latent signed-distance shape parameterization for shape optimization.

The package covers the full desk-scale pipeline: free-form deformation of
basis shapes into a training corpus, auto-decoder training of a latent
signed-distance representation, latent-space diagnostics, and derivative-free
optimization of the latent code against a mixing objective.
"""

from .mesh import TriMesh, read_obj, read_stl, write_obj, write_stl

__all__ = ["TriMesh", "read_obj", "write_obj", "read_stl", "write_stl"]

__version__ = "0.1.0"
