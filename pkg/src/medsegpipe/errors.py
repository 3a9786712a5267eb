"""Exception hierarchy.

``DataError`` covers bad inputs (malformed files, invalid configuration,
inconsistent shapes); the CLI maps it to exit code 2.  ``TrainingError``
covers runtime failures of the model (exit code 3).
"""


class PipelineError(Exception):
    """Base class for every error raised by medsegpipe."""


class DataError(PipelineError):
    """Input data or configuration is invalid."""


class TrainingError(PipelineError):
    """The model could not be trained or used."""


# NIfTI parsing / emission


class NiftiError(DataError):
    pass


class BadMagic(NiftiError):
    pass


class InvalidHeader(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class TruncatedData(NiftiError):
    def __init__(self, expected, actual):
        super().__init__(f"voxel data truncated: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteVoxel(NiftiError):
    pass


class TooManyClasses(NiftiError):
    pass


# sample I/O


class SampleNotFound(DataError, LookupError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


# argument validation


class InvalidRange(DataError, ValueError):
    pass


class InvalidSpacing(DataError, ValueError):
    pass


class InvalidPatchSpec(DataError, ValueError):
    pass


class GridShapeMismatch(DataError, ValueError):
    pass


class PatchCountMismatch(DataError, ValueError):
    pass


class NotThreeDimensional(DataError, ValueError):
    pass


class EmptyInput(DataError, ValueError):
    pass


# on-disk formats


class CorruptCache(DataError):
    pass


class CorruptModel(DataError):
    pass


# evaluation splits


class InvalidK(DataError, ValueError):
    pass


class TooFewSamples(DataError, ValueError):
    pass


class InvalidFraction(DataError, ValueError):
    pass


class OverlappingSets(DataError, ValueError):
    pass


class UnknownId(DataError, LookupError):
    pass


# configuration


class ConfigError(DataError):
    pass


class ParseError(ConfigError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ConfigError, ValueError):
    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class UnknownKey(ConfigError):
    def __init__(self, name, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown configuration key '{name}'{where}")
        self.name = name


# model


class NonFiniteLoss(TrainingError):
    pass


class UntrainedModel(TrainingError):
    pass
