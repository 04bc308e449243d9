"""Exception hierarchy shared by every spikegrad module."""


class SpikegradError(Exception):
    pass


class DimensionError(SpikegradError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SpikegradError, ValueError):
    """A precondition on arguments or call order was violated."""


class TrainingError(SpikegradError, RuntimeError):
    """Training could not continue (non-finite loss or gradients).

    ``checkpoint`` carries the last good state when one exists.
    """

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


class FormatError(SpikegradError, ValueError):
    """A binary input file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(SpikegradError, ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class TopologyError(CheckpointError):
    pass
