"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, unknown variants, malformed files.

    The CLI maps this to exit code 2; runtime failures exit 1.
    """


class ManifestError(ConfigError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries the offending batch ids."""

    def __init__(self, message, identity_ids=None):
        super().__init__(message)
        self.identity_ids = list(identity_ids) if identity_ids is not None else []
