# errors.py
"""
Exception hierarchy for mpscope.

Every error carries the process exit code the CLI maps it to:
    2 - input-format error (bad checkpoint bytes, unparseable metrics file)
    3 - configuration / tensor mismatch
    4 - numeric failure (non-finite loss, SVD non-convergence)
"""

EXIT_OK = 0
EXIT_INPUT_FORMAT = 2
EXIT_CONFIG_MISMATCH = 3
EXIT_NUMERIC = 4


class MpscopeError(Exception):
    """Base class for all errors raised by this package"""
    exit_code = 1


# --- Input format (exit 2) ---

class InputFormatError(MpscopeError, ValueError):
    exit_code = EXIT_INPUT_FORMAT


class TensorFormatError(InputFormatError):
    """A checkpoint file could not be decoded"""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DuplicateTensorError(TensorFormatError):
    pass


class PayloadSizeError(TensorFormatError):
    """Shape and byte count disagree for a tensor"""
    pass


class MetricsFormatError(InputFormatError):
    pass


# --- Configuration / mismatch (exit 3) ---

class ConfigError(MpscopeError, ValueError):
    exit_code = EXIT_CONFIG_MISMATCH


class InvalidConfigError(ConfigError):
    pass


class MissingTensorError(ConfigError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Missing tensor '{name}'")


class TensorShapeError(ConfigError):
    def __init__(self, name, expected, actual):
        self.name = name
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"Tensor '{name}' has shape {self.actual}, expected {self.expected}")


class ShapeMismatchError(ConfigError):
    """Operand shapes are incompatible for a matrix operation"""
    pass


class UnknownMetricError(ConfigError):
    pass


# --- Numeric (exit 4) ---

class NumericError(MpscopeError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class SvdConvergenceError(NumericError):
    pass


class NonFiniteError(NumericError):
    """A loss, gradient or logit became NaN/Inf"""

    def __init__(self, message, step=None, head=None, position=None):
        self.base_message = message
        self.step = step
        self.head = head
        self.position = position
        details = []
        if step is not None:
            details.append(f"step={step}")
        if head is not None:
            details.append(f"head={head}")
        if position is not None:
            details.append(f"position={position}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")

    def at_step(self, step):
        """Return a copy of this error annotated with the training step"""
        return NonFiniteError(self.base_message, step=step, head=self.head, position=self.position)
