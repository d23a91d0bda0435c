"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class ManifestError(InvalidArgument):
    """Base for manifest validation failures; ``entry`` names the offender."""

    def __init__(self, message, entry=None):
        super().__init__(message)
        self.entry = entry


class ManifestNotFound(ManifestError, FileNotFoundError):
    pass


class MalformedRecord(ManifestError):
    pass


class DanglingReference(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class NonFiniteLoss(RuntimeError):
    """Raised by the latent optimizer; carries the trace recorded so far."""

    def __init__(self, message, step, trace):
        super().__init__(message)
        self.step = step
        self.trace = trace
