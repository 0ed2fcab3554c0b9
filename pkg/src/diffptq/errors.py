"""Exception hierarchy shared by the library and the CLI."""


class DiffPTQError(Exception):
    """Base class for all errors raised by diffptq."""


class InvalidArgumentError(DiffPTQError, ValueError):
    pass


class TrainingFailure(DiffPTQError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at training step {step}")
        self.step = step
        self.loss = loss


class UncalibratedTimestepError(DiffPTQError, LookupError):
    def __init__(self, layer: str, t: int):
        super().__init__(f"no activation quantizer for layer {layer!r} at timestep {t}")
        self.layer = layer
        self.t = t


class ConfigError(DiffPTQError):
    """Unreadable or invalid experiment configuration (CLI exit code 2)."""


class ConsistencyError(DiffPTQError):
    """Persisted artifacts disagree with the active configuration (CLI exit code 3)."""


class NotFoundError(DiffPTQError, FileNotFoundError):
    pass
