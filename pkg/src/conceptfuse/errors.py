"""Exception types shared across the package."""


class ConceptFuseError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(ConceptFuseError, ValueError):
    pass


class ShapeError(ConceptFuseError, ValueError):
    pass


class NumericalDivergence(ConceptFuseError, ArithmeticError):
    """A non-finite value showed up during a numerical routine.

    ``last_finite`` holds the last iterate (or latent) that was still finite,
    when one is available.
    """

    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


class TuningDiverged(NumericalDivergence):
    def __init__(self, step, loss, last_finite=None):
        super().__init__(f"tuning loss became non-finite at step {step}: {loss!r}", last_finite)
        self.step = step
        self.loss = loss


class IncompatibleAdapter(ConceptFuseError):
    pass


class UnknownToken(ConceptFuseError, KeyError):
    def __init__(self, token):
        super().__init__(token)
        self.token = token

    def __str__(self):
        return f"unknown token {self.token!r}"


class WeightNormalizationError(ConceptFuseError, ValueError):
    pass


class EmptyFusion(ConceptFuseError, ValueError):
    pass


class TokenCollision(ConceptFuseError, ValueError):
    def __init__(self, name, first, second):
        super().__init__(f"token {name!r} defined by both {first} and {second}")
        self.name = name
        self.parties = (first, second)


# file-format errors
class FormatError(ConceptFuseError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class FingerprintMismatch(FormatError, IncompatibleAdapter):
    pass


class TruncatedFile(FormatError):
    pass


class MissingManifest(FormatError):
    pass


class ShapeInconsistent(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, message, path=None, row=None, col=None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"column {col}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path = path
        self.row = row
        self.col = col


class OverlapWarning(UserWarning):
    """Two region masks claim the same latent position; the later one wins."""
