"""meshbake: two-stage SDF reconstruction and view-aware texture baking."""

__version__ = "0.1.0"

from .errors import (CapacityError, DivergenceError, EmptyMeshError,
                     FormatError, MeshbakeError, UsageError, ValidationError)

__all__ = [
    "CapacityError", "DivergenceError", "EmptyMeshError", "FormatError",
    "MeshbakeError", "UsageError", "ValidationError", "__version__",
]
