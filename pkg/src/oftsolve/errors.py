"""Exception types shared across the solver."""


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition, or an internal
    bookkeeping invariant broke."""


class IllegalMoveError(ValueError):
    def __init__(self, cell, reason="cell is not empty"):
        self.cell = cell
        super().__init__(f"illegal move at cell {cell}: {reason}")


class ExtractionError(RuntimeError):
    pass


class OracleOverflow(MemoryError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class FramingError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ProtocolError(ValueError):
    pass
