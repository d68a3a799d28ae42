"""Exception types shared across the package."""


class QisError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(QisError):
    pass


class EmptyImage(QisError):
    pass


class OutOfBounds(QisError):
    pass


class MixedPolarity(QisError):
    pass


class NonPositiveDenominator(QisError):
    """A cell is folded so badly that the Beltrami quotient is undefined."""


class DegenerateDilatation(QisError):
    """|mu| >= 1 somewhere, so the dilatation (1+|mu|)/(1-|mu|) blows up."""


class OrientationViolation(QisError):
    """A deformation has a cell with non-positive Jacobian determinant."""


class EmptyRegion(QisError):
    """A region that must be nonempty (for means / theorem evaluation) is empty."""


class DegenerateContrast(QisError):
    """p0 == p1: the click-weight theorems exclude this case."""


class DegenerateTemplate(QisError):
    pass


class NothingToUndo(QisError):
    pass


class UnknownArtifact(QisError):
    pass


class HistoryLimit(QisError):
    pass
