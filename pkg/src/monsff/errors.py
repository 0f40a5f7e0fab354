"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MonsffError(Exception):
    exit_code = 1


class ValidationError(MonsffError, ValueError):
    """Bad parameter, non-Hermitian input, malformed grid."""

    exit_code = 2


class ConfigError(ValidationError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ResourceError(MonsffError):
    exit_code = 3


class StepSizeError(ValidationError):
    def __init__(self, dt, required):
        super().__init__(f"dt={dt:.3g} violates the stability guard; need dt <= {required:.3g}")
        self.required = required


class FeatureNotFound(MonsffError):
    exit_code = 4


class SpectrumFileError(MonsffError, ValueError):
    exit_code = 2
