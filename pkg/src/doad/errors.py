class DoadError(Exception):
    pass


class DimensionError(DoadError, ValueError):
    pass


class DomainError(DoadError, ValueError):
    pass


class ContractError(DoadError, RuntimeError):
    pass


class ConfigError(DoadError, ValueError):
    pass


class FormatError(DoadError, ValueError):
    pass


class ParseError(DoadError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GenerationError(DoadError, RuntimeError):
    def __init__(self, message: str, seed: int, clip_index: int):
        super().__init__(f"{message} (seed={seed}, clip={clip_index})")
        self.seed = seed
        self.clip_index = clip_index


class TrainingError(DoadError, RuntimeError):
    def __init__(self, step: int, lr: float, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step} (lr={lr:g})")
        self.step = step
        self.lr = lr
