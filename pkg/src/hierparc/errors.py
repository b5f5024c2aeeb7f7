"""Exception hierarchy.

Validation errors (bad input, mismatched shapes, malformed files) derive from
:class:`ValidationError`; the CLI maps them to exit code 1. Everything else
that derives from :class:`HierParcError` is a runtime failure (exit code 2).
"""


class HierParcError(Exception):
    """Base class for all package errors."""


class ValidationError(HierParcError, ValueError):
    """Input failed a precondition."""


class RuntimeFailure(HierParcError, RuntimeError):
    """A computation could not complete."""


# taxonomy
class TaxonomyError(ValidationError):
    pass


class DuplicateName(TaxonomyError):
    pass


class BadIndent(TaxonomyError):
    pass


class EmptyDocument(TaxonomyError):
    pass


class MultipleRoots(TaxonomyError):
    pass


class UnknownLeaf(ValidationError):
    pass


class UnknownNode(ValidationError):
    pass


class LevelOutOfRange(ValidationError):
    pass


class RootRequested(ValidationError):
    pass


# numerics
class ShapeMismatch(ValidationError):
    pass


class TargetOutOfRange(ValidationError):
    pass


# phantom / io
class UncoveredVoxel(ValidationError):
    pass


class FormatError(ValidationError):
    """Binary container or config file could not be decoded."""


class ConfigMismatch(ValidationError):
    pass


class EmptySplit(ValidationError):
    pass


# training
class MissingCache(RuntimeFailure):
    pass


class NonFiniteGradient(RuntimeFailure):
    pass


class NonFiniteLoss(RuntimeFailure):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
