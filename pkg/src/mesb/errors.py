"""Exception hierarchy shared across the package."""


class MesbError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(MesbError, ValueError):
    pass


class OperatorContractError(MesbError):
    """A linear operator broke its symmetry / positive-definiteness contract."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class CapabilityError(MesbError):
    """A sampler needs a denoiser capability (e.g. a VJP) that is missing."""


class PreconditionError(MesbError):
    pass


class ExternalDenoiserError(MesbError):
    """The external denoiser subprocess failed, timed out, or misbehaved."""

    def __init__(self, message, diagnostics=""):
        if diagnostics:
            message = f"{message}\n--- subprocess diagnostics ---\n{diagnostics}"
        super().__init__(message)
        self.diagnostics = diagnostics


class ProtocolError(ExternalDenoiserError):
    pass


class ConfigError(MesbError):
    def __init__(self, message, line=None, key=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"key '{key}'")
        if loc:
            message = f"{', '.join(loc)}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
