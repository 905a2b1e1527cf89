"""
Error vocabulary for accjoint

Every failure the library can report carries a stable machine-readable
code and the exit status the CLI maps it to.

Usage:
    from errors import InvalidInputError

    raise InvalidInputError("rt must be positive", rt=rt)
"""

from typing import Any, Dict


class AccJointError(Exception):
    """Base class for all reported errors"""

    code = "E_INTERNAL"
    exit_status = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form written to stderr by the CLI"""
        return {
            "code": self.code,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


class InvalidInputError(AccJointError, ValueError):
    """Argument violates a documented precondition"""

    code = "E_INVALID_INPUT"
    exit_status = 2


class ConfigurationError(AccJointError, ValueError):
    """Model spec, config file or design document is unusable"""

    code = "E_CONFIG"
    exit_status = 2


class DataNotFoundError(ConfigurationError):
    code = "E_DATA_NOT_FOUND"


class ModelNotFoundError(ConfigurationError):
    code = "E_MODEL_NOT_FOUND"


class NumericalError(AccJointError, ArithmeticError):
    """Linear algebra failed even after jitter"""

    code = "E_NUMERICAL"
    exit_status = 3


class InitializationError(AccJointError):
    code = "E_INIT"
    exit_status = 3


class ConstructionError(AccJointError):
    """Simulation generator could not be built (non-PD covariance)"""

    code = "E_CONSTRUCTION"
    exit_status = 3


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)
