"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 2 for data/format
problems, 3 for numeric or precondition failures.
"""

from __future__ import annotations


class WeightprintError(Exception):
    exit_code = 2


class FormatError(WeightprintError):
    """Malformed input data: checkpoint bytes, preset files, reports."""


class CheckpointFormatError(FormatError):
    pass


class DuplicateTensorError(CheckpointFormatError):
    pass


class PresetError(FormatError):
    pass


class LayoutError(FormatError):
    pass


class LoraPairingError(FormatError):
    pass


class ReportError(FormatError):
    pass


class PreconditionError(WeightprintError):
    exit_code = 3


class NonFiniteError(PreconditionError):
    def __init__(self, tensor: str, flat_index: int, value: float):
        super().__init__(f"non-finite value {value!r} in tensor {tensor!r} at flat index {flat_index}")
        self.tensor = tensor
        self.flat_index = flat_index


class DegenerateError(PreconditionError):
    """A group or profile with zero spread where normalization needs one."""


class RankError(PreconditionError):
    pass


class SchemeMismatchError(PreconditionError):
    pass
