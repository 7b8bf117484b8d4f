"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument value is outside its documented domain."""


class ShapeError(ValueError):
    """Array arguments have incompatible or unexpected shapes."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; message carries step/t/batch ids."""


class AtlasFormatError(ValueError):
    """A region-atlas file failed to parse; carries line/column context."""

    def __init__(self, line: int, col: int, message: str):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}")
