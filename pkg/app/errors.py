"""
Exception hierarchy for coxmt.

Three families map onto CLI exit codes (see app/cli/runner.py):
- InputError            → 2 (bad files, bad configs, bad shapes from the user)
- DivergedTrainingError → 3
- ProtocolViolationError→ 4 (too few events, leaks, impossible splits)
Numerical/shape errors raised inside the engine derive from CoxMTError directly.
"""
from __future__ import annotations

from typing import Iterable, Optional, Sequence


class CoxMTError(Exception):
    """Root of every error raised by this package."""


# ----------------- Engine (autodiff / model) ----------------- #

class DimensionError(CoxMTError):
    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = [tuple(s) for s in shapes]
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class RankError(CoxMTError):
    pass


class DomainError(CoxMTError):
    pass


class InvalidRiskSetError(CoxMTError):
    pass


class DegenerateAttentionError(CoxMTError):
    pass


class DivergedTrainingError(CoxMTError):
    def __init__(self, message: str, step: Optional[int] = None, epoch: Optional[int] = None):
        self.step = step
        self.epoch = epoch
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


# ----------------- Input / config ----------------- #

class InputError(CoxMTError):
    pass


class IngestionFormatError(InputError):
    def __init__(self, message: str, path: Optional[str] = None,
                 row: Optional[int] = None, column: Optional[int] = None):
        self.path = path
        self.row = row
        self.column = column
        parts = [message]
        if path:
            parts.append(f"file={path}")
        if row is not None:
            parts.append(f"row={row}")
        if column is not None:
            parts.append(f"column={column}")
        super().__init__(" | ".join(parts))


class DuplicateSampleError(InputError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"duplicate sample id: {sample_id}")


class JoinError(InputError):
    def __init__(self, sample_id: str, message: str = "clinical id absent from expression matrix"):
        self.sample_id = sample_id
        super().__init__(f"{message}: {sample_id}")


class MissingHousekeepingError(InputError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(set(missing))
        super().__init__(f"housekeeping genes missing: {', '.join(self.missing)}")


class DegenerateReferenceError(InputError):
    pass


class BoundError(InputError):
    pass


class ConfigError(InputError):
    pass


class PreprocessingOrderError(InputError):
    pass


# ----------------- Protocol ----------------- #

class ProtocolViolationError(CoxMTError):
    pass


class NoEventsError(ProtocolViolationError):
    pass


class InsufficientEventsError(ProtocolViolationError):
    pass


class LeakError(ProtocolViolationError):
    pass


class LedgerMismatchError(ProtocolViolationError):
    pass


# ----------------- Metrics ----------------- #

class UndefinedMetricError(CoxMTError):
    pass


class TruncationError(CoxMTError):
    pass


class StratificationError(CoxMTError):
    pass
