"""Exception hierarchy shared by every module of the package."""


class ArraySSLError(Exception):
    """Base class for all package errors."""


class ShapeError(ArraySSLError, ValueError):
    pass


class ParameterError(ArraySSLError, ValueError):
    pass


class DegenerateBatchError(ArraySSLError, ValueError):
    """Batch norm in train mode saw a single element per channel."""


class NonFiniteError(ArraySSLError, FloatingPointError):
    """A loss or gradient became NaN/inf.

    ``batch_index`` is filled in by the training loop when known.
    """

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class FormatError(ArraySSLError, ValueError):
    """A file on disk does not match its declared binary or text layout."""


class SceneError(ArraySSLError, ValueError):
    pass


class LabelError(ArraySSLError, ValueError):
    pass


class TransferError(ArraySSLError, ValueError):
    pass


class ConfigError(ArraySSLError, ValueError):
    pass


class DegenerateExampleWarning(UserWarning):
    """Standardization of a constant example."""


class NoSignalWarning(UserWarning):
    """Bandwidth loss evaluated on an example without any labeled signal."""
