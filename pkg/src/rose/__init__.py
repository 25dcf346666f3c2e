"""Restores normal-light 3D scenes from low-light multiview images by
estimating a multiview-consistent illuminance transition field alongside
a standard radiance field, trained end-to-end from the low-light
observations only."""

__version__ = "0.1.0"
