"""Label-free structured pruning with a generator/discriminator game and a sparse soft mask."""

from . import fista, gal, networks, numerics
from .numerics import Tensor

__all__ = ["Tensor", "fista", "gal", "networks", "numerics"]
__version__ = "0.1.0"
