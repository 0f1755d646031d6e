"""Exception hierarchy. Every error carries a stable ``code`` string."""


class StreamKVError(Exception):
    code = "StreamKVError"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class NonFiniteInput(StreamKVError, ValueError):
    code = "NonFiniteInput"


class ShapeMismatch(StreamKVError, ValueError):
    code = "ShapeMismatch"


class OddHeadDim(StreamKVError, ValueError):
    code = "OddHeadDim"


class InvalidShape(StreamKVError, ValueError):
    code = "InvalidShape"


class PositionOrderViolation(StreamKVError, ValueError):
    code = "PositionOrderViolation"


class IndexOutOfRange(StreamKVError, IndexError):
    code = "IndexOutOfRange"


class WindowTooLarge(StreamKVError, ValueError):
    code = "WindowTooLarge"


class ConfigInconsistent(StreamKVError, ValueError):
    code = "ConfigInconsistent"


class EmptyCache(StreamKVError, ValueError):
    code = "EmptyCache"


class StaleIndex(StreamKVError, RuntimeError):
    code = "StaleIndex"


class InvalidSpec(StreamKVError, ValueError):
    code = "InvalidSpec"


class NotATrace(StreamKVError, ValueError):
    code = "NotATrace"


class CorruptTrace(StreamKVError, ValueError):
    code = "CorruptTrace"


class UnsupportedVersion(StreamKVError, ValueError):
    code = "UnsupportedVersion"


class KTooLarge(StreamKVError, ValueError):
    code = "KTooLarge"


class EmptyAnswerSet(StreamKVError, ValueError):
    code = "EmptyAnswerSet"


class KZero(StreamKVError, ValueError):
    code = "KZero"


class MemoryBoundViolation(StreamKVError, AssertionError):
    code = "MemoryBoundViolation"
