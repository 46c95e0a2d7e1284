"""Point-source backscatter for the 3D wave equation with a compactly supported potential."""

__version__ = "0.1.0"
