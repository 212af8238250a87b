"""Exception hierarchy shared across the package."""


class CrossModalError(Exception):
    pass


class FormatError(CrossModalError, ValueError):
    """Malformed file contents (bad header, unparsable token)."""


class TruncationError(FormatError):
    """A file declared more records than it provides."""


class MeshIndexError(CrossModalError, IndexError):
    pass


class DegenerateError(CrossModalError, ValueError):
    """Geometry with zero area / zero extent where a positive one is needed."""


class CameraError(CrossModalError, ValueError):
    pass


class ShapeError(CrossModalError, ValueError):
    pass


class SizeError(CrossModalError, ValueError):
    pass


class ContractError(CrossModalError, RuntimeError):
    """A caller violated a documented precondition."""


class ConfigError(CrossModalError, ValueError):
    pass


class TrainingFault(CrossModalError, FloatingPointError):
    """Non-finite values appeared during optimization."""
