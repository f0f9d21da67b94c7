"""Self-supervised FCN-based 3D deformable image registration.

Heavy submodules import numpy; keep this module import-light so the CLI can
configure threading before numpy loads.
"""

__version__ = "0.1.0"
