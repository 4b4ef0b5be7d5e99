"""cloudloc: 6-DOF localization of 2D images in 3D point clouds by direct
matching of 2D and 3D feature descriptors."""

__version__ = "0.1.0"
