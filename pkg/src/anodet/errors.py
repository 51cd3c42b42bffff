"""Exception hierarchy.

The CLI maps these onto exit codes: DegenerateInputError -> 2, everything
else raised by the library -> 1.
"""


class AnodetError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(AnodetError, ValueError):
    """Invalid argument: out-of-domain value, bad size, bad shape."""


class ContractError(AnodetError, ValueError):
    """Inputs violate a cross-object contract (e.g. mismatched dims)."""


class FileFormatError(AnodetError):
    """A file exists but cannot be used as requested."""


class UnsupportedFormatError(FileFormatError):
    """File is not one of the supported raster formats."""


class CorruptFileError(FileFormatError):
    """File header or payload is damaged or truncated."""


class ManifestError(FileFormatError):
    """External-feature manifest is inconsistent with the files on disk."""


class DatasetLayoutError(AnodetError):
    """Dataset directory does not follow the expected layout.

    ``offenders`` lists the paths that triggered the error.
    """

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class DegenerateInputError(AnodetError):
    """Input carries no usable signal (e.g. a constant image).

    ``code`` is a stable machine-readable tag such as ``"no_texture"``;
    ``scale_index``/``channel_index`` carry provenance when the error
    surfaces from inside the detection pipeline.
    """

    def __init__(self, message, code="degenerate", scale_index=None, channel_index=None):
        super().__init__(message)
        self.code = code
        self.scale_index = scale_index
        self.channel_index = channel_index


class MetricError(AnodetError):
    """A requested metric is undefined for the given data."""
