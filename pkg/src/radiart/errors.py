"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class ValidationError(ValueError):
    """Bad inputs, configs, or invariant violations (exit code 2)."""


class DatasetFormatError(ValidationError):
    """Missing or malformed dataset manifest."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses (exit code 3)."""


class BridgeError(RuntimeError):
    """Remote encoder unreachable or misbehaving (exit code 4)."""
