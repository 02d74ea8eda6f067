class QuantUNetError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(QuantUNetError, ValueError):
    pass


class ContractError(QuantUNetError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(QuantUNetError, ValueError):
    pass


class IngestionError(QuantUNetError):
    pass


class SplitError(QuantUNetError, ValueError):
    pass


class CheckpointError(QuantUNetError):
    pass


class ExportError(QuantUNetError):
    pass


class PackError(QuantUNetError, ValueError):
    pass


class TrainingError(QuantUNetError, RuntimeError):
    pass


class ReportError(QuantUNetError):
    pass
