"""Exception hierarchy shared by every fedsim module."""


class FedsimError(Exception):
    """Base class for all errors raised by fedsim."""


class ArgumentError(FedsimError, ValueError):
    """A function received an argument outside its domain."""


class ConfigurationError(FedsimError, ValueError):
    """A model or experiment configuration is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ShapeError(FedsimError, ValueError):
    """Array shapes or vector lengths do not line up."""


class DegenerateBatchError(FedsimError, ValueError):
    """Train-mode batch normalization was asked to normalize a single row."""


class StateError(FedsimError, RuntimeError):
    """An object is in a state that does not permit the requested operation."""


class IngestionError(FedsimError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class PreprocessStateError(StateError):
    pass


class UndefinedMetricError(FedsimError, ValueError):
    pass


class EstimationError(FedsimError, RuntimeError):
    pass


class DegenerateDataError(EstimationError):
    pass


class CheckpointNotFound(FedsimError, LookupError):
    pass


class IntegrityError(FedsimError):
    """A checkpoint file failed magic, length, or CRC validation."""


class ProtocolError(FedsimError, RuntimeError):
    pass


class ClientAbandoned(FedsimError, RuntimeError):
    def __init__(self, client_id, recoveries):
        super().__init__(f"client {client_id} abandoned after {recoveries} recoveries")
        self.client_id = client_id
        self.recoveries = recoveries


class TrainingAborted(FedsimError, RuntimeError):
    pass
