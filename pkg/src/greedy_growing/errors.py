"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent.

    ``problems`` holds every violation found, not just the first one.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IncompatibleDonorError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, loss, dump_path=None):
        self.step = step
        self.loss = loss
        self.dump_path = dump_path
        msg = f"non-finite loss {loss!r} at step {step}"
        if dump_path is not None:
            msg += f" (diagnostic checkpoint: {dump_path})"
        super().__init__(msg)


class SweepError(RuntimeError):
    def __init__(self, weight, cause):
        self.weight = weight
        super().__init__(f"guidance weight {weight}: {cause}")
