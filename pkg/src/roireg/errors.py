class RegistrationError(Exception):
    """Base class for pipeline failures that callers may want to catch."""


class EmptyMaskError(RegistrationError, ValueError):
    pass


class AlignmentError(RegistrationError, ValueError):
    pass


class ROIError(RegistrationError, ValueError):
    pass


class LossError(RegistrationError, ValueError):
    pass


class MetricError(RegistrationError, ValueError):
    pass


class PhantomGenerationError(RegistrationError):
    pass


class ConfigurationError(RegistrationError, ValueError):
    pass


class IngestionError(RegistrationError, FileNotFoundError):
    pass


class TrainingError(RegistrationError, FloatingPointError):
    pass
