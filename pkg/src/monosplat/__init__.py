"""Feed-forward 3D Gaussian reconstruction at desk scale.

Pipeline: posed images -> monocular features -> multi-view adapted features
-> plane-sweep cost volume -> per-pixel Gaussian primitives -> tile-based
differentiable splatting.
"""

__version__ = "0.1.0"

from .numerics import NumericError, Parameter, read_mtf, write_mtf

__all__ = ["NumericError", "Parameter", "read_mtf", "write_mtf", "__version__"]
