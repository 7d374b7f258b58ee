"""Exception types shared across the package."""


class ScriptKdError(Exception):
    """Base class for all package errors."""


class DimensionError(ScriptKdError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ScriptKdError, ValueError):
    """A configuration value is outside its allowed range."""


class NumericDomainError(ScriptKdError, ValueError):
    """An input contains values outside the numeric domain (NaN/inf)."""


class ContractError(ScriptKdError, RuntimeError):
    """A call violated a documented precondition."""


class EmptyLossError(ContractError):
    """A loss was requested over zero supervised positions."""


class StateError(ScriptKdError, RuntimeError):
    """Operation invalid in the object's current state."""


class CapacityError(ScriptKdError, ValueError):
    """A sequence or buffer exceeds a configured maximum."""


class DataFormatError(ScriptKdError, ValueError):
    """A file or buffer does not match its expected format."""


class TrainingError(ScriptKdError, RuntimeError):
    """Training cannot proceed (e.g. empty corpus)."""


class VocabularyError(ScriptKdError, KeyError):
    """A symbol or token id is not part of the active vocabulary."""


class MeasurementError(ScriptKdError, RuntimeError):
    """A benchmark window was too short to produce a measurement."""
