"""fluorokit: sparse-view fluoroscopic 3D reconstruction toolkit."""

__version__ = "0.1.0"
