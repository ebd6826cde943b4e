"""Exception hierarchy shared across splatcal modules."""


class SplatcalError(Exception):
    """Base class for all library errors."""


class DegenerateRotation(SplatcalError):
    pass


class ShapeError(SplatcalError, ValueError):
    pass


class NonFiniteInput(SplatcalError, ValueError):
    pass


class NonFiniteLoss(SplatcalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(SplatcalError, ValueError):
    pass


class MissingGroundTruth(SplatcalError):
    pass


class SequenceTooShort(SplatcalError):
    pass


class EmptyProfile(SplatcalError):
    pass


class ManifestError(SplatcalError):
    pass


class IndexMismatch(SplatcalError, ValueError):
    pass


class DegenerateConfiguration(SplatcalError):
    pass


class EmptyMask(SplatcalError):
    pass
