# Builtin-rooted error types. Callers that only care about "bad input" can
# keep catching ValueError / RuntimeError.


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonDeterminismError(RuntimeError):
    pass


class AttentionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CorpusError(ValueError):
    pass


class StorageError(ValueError):
    pass


class ChecksumError(StorageError):
    pass


class VersionMismatchError(StorageError):
    pass


class FrozenParameterError(AssertionError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class PhaseError(RuntimeError):
    def __init__(self, phase, cause):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause
