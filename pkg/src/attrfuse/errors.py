"""Exception hierarchy shared by every attrfuse module."""


class AttrFuseError(Exception):
    pass


class DimensionError(AttrFuseError, ValueError):
    """A tensor width does not match what a layer expects."""


class ConfigurationError(AttrFuseError, ValueError):
    pass


class DomainError(AttrFuseError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class PreconditionError(AttrFuseError, ValueError):
    pass


class SequencingError(AttrFuseError, RuntimeError):
    pass


class OracleInvalidError(AttrFuseError, RuntimeError):
    """The finite-difference oracle cannot be trusted (e.g. nondeterministic loss)."""


class FormatError(AttrFuseError, ValueError):
    pass


class IntegrityError(AttrFuseError, ValueError):
    pass


class TrainingDivergedError(AttrFuseError, RuntimeError):
    pass
