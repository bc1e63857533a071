"""Exception hierarchy shared by all meshbake modules."""


class MeshbakeError(Exception):
    """Base class for all meshbake errors."""


class ValidationError(MeshbakeError):
    """Invalid argument values, shapes, or domain constraints."""


class FormatError(MeshbakeError):
    """Malformed or incompatible on-disk data (manifests, packages, checkpoints)."""


class CapacityError(MeshbakeError):
    """A fixed-size resource (atlas, grid) cannot hold the requested content."""


class EmptyMeshError(MeshbakeError):
    """Isosurface extraction found no zero crossing."""


class DivergenceError(MeshbakeError):
    """Training produced a non-finite loss."""


class UsageError(MeshbakeError):
    """API called out of order or with missing prerequisite state."""


# Process exit codes used by the CLI.
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
