"""HTTP promptable-segmentation service with a region-growing baseline."""

from .app import create_app
from .backends import RegionGrowingBackend, get_backend, register_backend

__version__ = "0.1.0"

__all__ = ["create_app", "RegionGrowingBackend", "get_backend", "register_backend", "__version__"]
