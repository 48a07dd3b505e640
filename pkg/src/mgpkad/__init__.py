"""Single-view implicit reconstruction with category geometric priors and a KAN decoder."""

from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
