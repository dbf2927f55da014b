"""Exception hierarchy.

Every error raised by the library derives from :class:`QuasiStiffError`. The
three branches map onto the CLI exit codes (config 2, data 3, numeric 4).
"""


class QuasiStiffError(Exception):
    exit_code = 1


class ConfigError(QuasiStiffError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """An argument is outside its documented domain."""


class DataError(QuasiStiffError, ValueError):
    exit_code = 3


class ValidationError(DataError):
    pass


class FeatureExtractionError(DataError):
    pass


class SegmentationError(DataError):
    pass


class StreamError(DataError):
    pass


class MissingArtifactError(DataError):
    """An upstream artifact is absent; ``producer`` names the subcommand that makes it."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        names = (producer,) if isinstance(producer, str) else tuple(producer)
        hint = " or ".join(f"`quasistiff {n}`" for n in names)
        super().__init__(f"missing artifact {path} (run {hint} first)")


class NumericError(QuasiStiffError, ArithmeticError):
    exit_code = 4


class FitError(NumericError):
    pass


class CollapseError(FitError):
    pass


class StiffnessError(NumericError):
    pass
