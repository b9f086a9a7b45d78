"""Learning discrete bond-based peridynamic micro-moduli from coarse-grained
elastodynamics data of periodic two-phase media."""

from pdkl.errors import PdklError

__version__ = "0.1.0"

__all__ = ["PdklError", "__version__"]
