"""Exception hierarchy shared by every module in the package."""


class AdaPGCError(Exception):
    """Base class for all package errors."""


class ContractViolation(AdaPGCError, ValueError):
    """An argument violates a documented precondition (shapes, ranges)."""


class RejectedInput(AdaPGCError, ValueError):
    """Input data is malformed, e.g. contains non-finite coordinates."""


class RejectedBatch(RejectedInput):
    """A batch failed validation (e.g. responsibilities that are not distributions)."""


class RejectedSample(RejectedInput):
    """A single sample cannot be processed (e.g. a zero-norm feature vector)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericalDegeneracy(AdaPGCError, ArithmeticError):
    """A covariance could not be factorized even after repeated shrinkage."""

    def __init__(self, message, class_index=None):
        super().__init__(message)
        self.class_index = class_index


class NonFiniteLoss(AdaPGCError, ArithmeticError):
    """A loss value or gradient became NaN/inf during adaptation."""

    def __init__(self, message, loss_name=None):
        super().__init__(message)
        self.loss_name = loss_name


class ConfigError(AdaPGCError, ValueError):
    """Invalid configuration or scenario specification; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class StreamFormatError(AdaPGCError, IOError):
    """A binary file could not be parsed; carries the path and byte offset."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


class EmptyClass(AdaPGCError):
    """Raised by MLE recovery when a class has zero accumulated mass."""

    def __init__(self, message="class has zero accumulated count", class_index=None):
        super().__init__(message)
        self.class_index = class_index
