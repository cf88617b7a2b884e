"""Content-aware retargeting of images and 3D point sets with neural deformation fields.

Submodules are imported lazily so the command line starts quickly.
"""

__version__ = "0.1.0"
