"""Exception types raised across the pipeline."""


class AlignError(Exception):
    """Base class for all errors raised by align_qi."""


class FormatError(AlignError):
    """Binary input has an impossible layout."""


class SchemaError(AlignError):
    """JSON input is malformed or violates a field constraint.

    ``violations`` holds every problem found, not just the first.
    """

    def __init__(self, message, violations=None):
        self.violations = list(violations or [message])
        super().__init__(message)


class InvalidRotation(SchemaError):
    """An extrinsic rotation block is not orthonormal."""


class RleLengthMismatch(SchemaError):
    pass


class BboxMismatch(SchemaError):
    pass


class EmptyMask(SchemaError):
    pass


class DegenerateConfiguration(AlignError):
    """Pixel support does not span rank 3."""


class InsufficientPoints(AlignError):
    pass


class ZeroSurfacePoint(AlignError):
    """Surface point too close to the origin to define a ray direction."""


class BudgetOverflow(AlignError):
    pass


class PlacementFailure(AlignError):
    pass


class MismatchedSceneIds(AlignError):
    pass
