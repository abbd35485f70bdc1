"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class PrecisionError(ValueError):
    """Operands carry different element precisions."""


class TensorFileError(ValueError):
    """A tensor file is malformed (bad magic, dtype, dims, or payload length)."""


class ManifestError(ValueError):
    """A model manifest is malformed or inconsistent with its tensor files."""
