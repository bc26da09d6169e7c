"""Parallel-beam tomography: projectors, classical and learned reconstruction."""

from .core import Geometry, HuScale, make_geometry, hu_to_mu, mu_to_hu
from .radon import Projector
from .fbp import fbp

__version__ = "0.1.0"

__all__ = ["Geometry", "HuScale", "make_geometry", "hu_to_mu", "mu_to_hu", "Projector", "fbp", "__version__"]
