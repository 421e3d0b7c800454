"""Exception types shared across the toolkit."""


class TPPError(Exception):
    """Base class for all toolkit errors."""


# data ingestion / generation


class ParseError(TPPError):
    def __init__(self, line, msg=""):
        self.line = line
        super().__init__(f"line {line}: {msg}" if msg else f"line {line}")


class NonIncreasingTimes(TPPError):
    def __init__(self, seq_id, index):
        self.seq_id = seq_id
        self.index = index
        super().__init__(f"sequence {seq_id!r}: arrival time at index {index} is not strictly increasing")


class MarkOutOfRange(TPPError):
    def __init__(self, seq_id, index, mark=None, num_marks=None):
        self.seq_id = seq_id
        self.index = index
        super().__init__(f"sequence {seq_id!r}: mark {mark} at index {index} outside [0, {num_marks})")


class EmptyDataset(TPPError):
    pass


class TooFewSequences(TPPError):
    pass


class UnstableProcess(TPPError):
    pass


# differentiation core


class ShapeMismatch(TPPError):
    pass


class NonFiniteValue(TPPError):
    pass


class NonFiniteGradient(TPPError):
    def __init__(self, block):
        self.block = block
        super().__init__(f"non-finite gradient in block {block!r}")


# models / objectives


class NonPositiveTau(TPPError):
    pass


class ZeroTotalIntensity(TPPError):
    pass


class NonFiniteLoss(TPPError):
    def __init__(self, seq_index, event_index=None, term=""):
        self.seq_index = seq_index
        self.event_index = event_index
        where = f"sequence {seq_index}" + ("" if event_index is None else f", event {event_index}")
        super().__init__(f"non-finite {term or 'loss'} at {where}")


class NonMonotoneCompensator(TPPError):
    pass


class UnsupportedForm(TPPError):
    pass


# diagnostics / evaluation


class LengthMismatch(TPPError):
    pass


class BothZero(TPPError):
    pass


class EmptySeries(TPPError):
    pass


class NoConflictFound(TPPError):
    pass


class EmptySamples(TPPError):
    pass


class BracketFailure(TPPError):
    pass


class MissingCheckpoint(TPPError):
    pass


class MissingDiagnostics(TPPError):
    pass


class ConfigError(TPPError):
    pass
