"""Exception hierarchy.

Every error raised on bad input derives from :class:`ConnShrinkError`, which is
itself a ``ValueError`` so callers that only care about "bad input" can catch
that.
"""


class ConnShrinkError(ValueError):
    """Base class for all input / state errors raised by connshrink."""


# timeseries / IO
class SchemaError(ConnShrinkError):
    pass


class MissingFile(ConnShrinkError, FileNotFoundError):
    pass


class DuplicateId(ConnShrinkError):
    pass


class ParseError(ConnShrinkError):
    pass


class ShapeError(ConnShrinkError):
    pass


class NonFinite(ConnShrinkError):
    pass


class OutOfRange(ConnShrinkError):
    pass


class RankDeficient(ConnShrinkError):
    pass


class ShapeMismatch(ConnShrinkError):
    pass


# connectivity
class DegenerateColumn(ConnShrinkError):
    def __init__(self, region_ids):
        self.region_ids = list(region_ids)
        super().__init__(
            "constant time course (zero variance) for region(s): "
            + ", ".join(map(str, self.region_ids))
        )


class LengthError(ConnShrinkError):
    pass


class TooFewSubjects(ConnShrinkError):
    pass


# reliability
class MissingReference(ConnShrinkError):
    pass


class EmptyCell(ConnShrinkError):
    pass


# simulator / cli
class InvalidParams(ConnShrinkError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class MissingVisit(ConnShrinkError):
    pass


class MissingRun(ConnShrinkError, FileNotFoundError):
    pass
