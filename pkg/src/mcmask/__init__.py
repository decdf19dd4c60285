"""Multi-channel masking source separation in a learnable filterbank domain."""
from importlib import resources

from .numerics import NumericalError

__version__ = "0.1.0"
__all__ = ["NumericalError", "example_geometry_path", "__version__"]


def example_geometry_path():
    """Path to the bundled six-sensor example geometry."""
    return resources.files(__name__) / "data" / "geometry_6ch.yaml"
