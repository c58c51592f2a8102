"""Exception hierarchy.

Every error carries a short ``code`` used by the CLI to print a single
machine-parsable line on failure.
"""


class Lift3DError(Exception):
    code = "lift3d-error"


class InvalidJointSetError(Lift3DError, ValueError):
    code = "invalid-joint-set"


class CoordinateFrameError(Lift3DError, ValueError):
    code = "coordinate-frame"


class BehindCameraError(Lift3DError, ValueError):
    code = "behind-camera"


class InsufficientViewsError(Lift3DError, ValueError):
    code = "insufficient-views"


class DegenerateGeometryError(Lift3DError, ValueError):
    code = "degenerate-geometry"


class SequenceTooShortError(Lift3DError, ValueError):
    code = "sequence-too-short"


class NumericFailureError(Lift3DError, ArithmeticError):
    code = "numeric-failure"

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class StateError(Lift3DError, RuntimeError):
    code = "state-error"


class ModelFormatError(Lift3DError, ValueError):
    code = "model-format"


class ShapeError(Lift3DError, ValueError):
    code = "shape-mismatch"


class EmptyLossError(Lift3DError, ValueError):
    code = "empty-loss"


class AlignmentUndefinedError(Lift3DError, ValueError):
    code = "alignment-undefined"


class DatasetError(Lift3DError, ValueError):
    code = "dataset-error"


class ConfigError(Lift3DError, ValueError):
    code = "config-error"
