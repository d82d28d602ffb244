"""Segmentation backends and the plug-point for swapping them.

A backend is any object with ``segment(image, prompts) -> (mask, confidence)``
where ``image`` is an HxWx3 uint8 array, ``prompts`` a list of
``{"x", "y", "positive"}`` dicts, ``mask`` an HxW boolean array, and
``confidence`` a float in [0, 1]. Register an alternative (for example, a
learned model wrapper) with :func:`register_backend` and select it by name
when constructing the app; no model weights ship with this package.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .growing import DEFAULT_THRESHOLD, segment


class Backend(Protocol):
    name: str

    def segment(self, image: np.ndarray, prompts: list[dict]) -> tuple[np.ndarray, float]: ...


class RegionGrowingBackend:
    """Deterministic baseline: per-prompt region growing on color distance."""

    name = "region-growing"

    def __init__(self, threshold: float = DEFAULT_THRESHOLD):
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        self.threshold = threshold

    def segment(self, image: np.ndarray, prompts: list[dict]) -> tuple[np.ndarray, float]:
        return segment(image, prompts, self.threshold)


_REGISTRY: dict[str, type] = {"region-growing": RegionGrowingBackend}


def register_backend(name: str, factory: type) -> None:
    """Make a backend constructible by name (the plug-point for learned models)."""
    _REGISTRY[name] = factory


def get_backend(name: str, **kwargs) -> Backend:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown backend '{name}'; available: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)
