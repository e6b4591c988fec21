class StainforgeError(Exception):
    """Base class for all package errors."""


class InputError(StainforgeError, ValueError):
    pass


class ConfigError(StainforgeError, ValueError):
    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class CapabilityError(StainforgeError):
    """Backend lacks a requested feature (e.g. hierarchical features)."""


class TrainingError(StainforgeError, RuntimeError):
    def __init__(self, message, step=None, components=None):
        self.step = step
        self.components = dict(components or {})
        detail = message
        if step is not None:
            detail = f"step {step}: {detail}"
        if self.components:
            parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
            detail = f"{detail} ({parts})"
        super().__init__(detail)


class NumericError(StainforgeError, ArithmeticError):
    pass


class ManifestError(StainforgeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ArchiveError(StainforgeError):
    pass
