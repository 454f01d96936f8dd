from enum import Enum
from typing import Optional


class ErrorKind(str, Enum):
    BROKEN_WORLD = "BrokenWorld"
    REMOTE_WORKER = "RemoteWorker"
    TIMEOUT = "Timeout"
    UNKNOWN_WORLD = "UnknownWorld"
    WORLD_EXISTS = "WorldExists"
    RANK_CONFLICT = "RankConflict"
    SIZE_MISMATCH = "SizeMismatch"
    PROTOCOL = "Protocol"
    ABORTED = "Aborted"


class MwError(Exception):
    """Base exception class for every multi-world failure."""
    kind: ErrorKind = ErrorKind.PROTOCOL

    def __init__(self, detail: str, world: Optional[str] = None, kind: Optional[ErrorKind] = None):
        if kind is not None:
            self.kind = kind
        self.world = world
        self.detail = detail
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.world is not None:
            return f"{self.kind.value}(world={self.world}): {self.detail}"
        return f"{self.kind.value}: {self.detail}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({str(self)!r})"


class BrokenWorldError(MwError):
    """Raised for any operation on a world in which a member failure was detected."""
    kind = ErrorKind.BROKEN_WORLD

    def __init__(self, world: str, detail: str = "world is broken.", cause: Optional[MwError] = None):
        if not world:
            raise ValueError("BrokenWorldError requires a world name.")
        self.cause = cause
        if cause is not None:
            detail = f"{detail} cause: {cause}"
        super().__init__(detail=detail, world=world)


class RemoteWorkerError(MwError):
    """Raised when a peer resets, closes or leaves a connection."""
    kind = ErrorKind.REMOTE_WORKER

    def __init__(self, detail: str = "remote worker failed.", world: Optional[str] = None):
        super().__init__(detail=detail, world=world)


class MwTimeoutError(MwError):
    """Raised when a deadline passes before the awaited event."""
    kind = ErrorKind.TIMEOUT

    def __init__(self, detail: str = "operation timed out.", world: Optional[str] = None):
        super().__init__(detail=detail, world=world)


class UnknownWorldError(MwError):
    kind = ErrorKind.UNKNOWN_WORLD

    def __init__(self, world: Optional[str] = None, detail: str = "world is not registered."):
        super().__init__(detail=detail, world=world)


class WorldExistsError(MwError):
    kind = ErrorKind.WORLD_EXISTS

    def __init__(self, world: Optional[str] = None, detail: str = "world already exists."):
        super().__init__(detail=detail, world=world)


class RankConflictError(MwError):
    kind = ErrorKind.RANK_CONFLICT

    def __init__(self, detail: str = "rank already claimed.", world: Optional[str] = None):
        super().__init__(detail=detail, world=world)


class SizeMismatchError(MwError):
    kind = ErrorKind.SIZE_MISMATCH

    def __init__(self, detail: str = "world size disagrees with rendezvous.", world: Optional[str] = None):
        super().__init__(detail=detail, world=world)


class ProtocolError(MwError):
    """Raised on malformed frames, invariant violations and bad arguments."""
    kind = ErrorKind.PROTOCOL

    def __init__(self, detail: str = "protocol violation.", world: Optional[str] = None):
        super().__init__(detail=detail, world=world)


class AbortedError(MwError):
    """Raised for operations pending on a world that was removed."""
    kind = ErrorKind.ABORTED

    def __init__(self, world: str, detail: str = "operation aborted by world removal."):
        if not world:
            raise ValueError("AbortedError requires a world name.")
        super().__init__(detail=detail, world=world)
