class ConfigError(ValueError):
    """Raised when a scenario, model or experiment configuration is inconsistent."""


class MasksUnavailableError(RuntimeError):
    """Pointing-game evaluation was requested but the dataset carries no masks."""


class EmptyBufferError(RuntimeError):
    pass
